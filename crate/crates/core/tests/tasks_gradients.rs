//! Design and controller gradients of full task losses against central
//! finite differences.

use mfg_core::mpmsim::MpmConfig;
use mfg_core::rng;
use mfg_core::robotize::{robotize_x0, RobotDesign, RobotizeConfig};
use mfg_core::shapes::{sample_surface, ShapeFamily, ShapeSpec, DEFAULT_JITTER};
use mfg_core::tasks::{build_task, rollout_task_grad, TaskName};
use rand::Rng as _;

fn design(task: &mfg_core::tasks::TaskSpec) -> RobotDesign {
    let family = ShapeFamily::Blob {
        legs: 2,
        body_width: 0.8,
        body_height: 0.35,
        leg_length: 0.2,
        leg_width: 0.2,
    };
    let x0 = sample_surface(&ShapeSpec::new(family, 4), 256, DEFAULT_JITTER).unwrap();
    robotize_x0(&x0, task.workspace, task.actuators.as_ref(), &RobotizeConfig::default()).unwrap()
}

fn shifted(d: &RobotDesign, dir: &[[f64; 2]], h: f64) -> RobotDesign {
    let mut out = d.clone();
    for (p, v) in out.solid_points.iter_mut().zip(dir) {
        p[0] += h * v[0];
        p[1] += h * v[1];
    }
    out
}

fn check(name: TaskName) {
    let mpm = MpmConfig {
        control_steps: 10,
        ..MpmConfig::default()
    };
    let task = build_task(name, &mpm);
    let d = design(&task);
    let ctrl = task.controller.clone();
    let g = rollout_task_grad(&task, &d, &ctrl, &mpm).unwrap();
    // x moves depend on the column only and y moves on the row only, so
    // particles tied for an extreme coordinate move together and the
    // alignment and support maxima stay differentiable.
    let mut r = rng::seeded(name as u64);
    let (a, b, c, e) = (r.random::<f64>(), r.random::<f64>(), r.random::<f64>(), r.random::<f64>());
    let dir: Vec<[f64; 2]> = d
        .solid_points
        .iter()
        .map(|p| [(97.0 * p[0] + 6.0 * a).sin() + b - 0.5, (83.0 * p[1] + 6.0 * c).sin() + e - 0.5])
        .collect();
    let analytic: f64 = g.design.iter().zip(&dir).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
    let h = 1e-6;
    let lp = rollout_task_grad(&task, &shifted(&d, &dir, h), &ctrl, &mpm).unwrap().loss;
    let lm = rollout_task_grad(&task, &shifted(&d, &dir, -h), &ctrl, &mpm).unwrap().loss;
    let fd = (lp - lm) / (2.0 * h);
    let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-10);
    assert!(err < 1e-2, "{name}: design fd {fd} vs analytic {analytic}");

    let params = ctrl.params();
    if params.is_empty() {
        return;
    }
    // Largest gradient component away from the actuation clamp.
    let i = (0..params.len())
        .filter(|&i| params[i].abs() < 0.9)
        .max_by(|&a, &b| g.controller[a].abs().total_cmp(&g.controller[b].abs()))
        .unwrap();
    let h = 1e-6;
    let run = |s: f64| {
        let mut c = ctrl.clone();
        let mut p = params.clone();
        p[i] += s * h;
        c.set_params(&p).unwrap();
        rollout_task_grad(&task, &d, &c, &mpm).unwrap().loss
    };
    let fd = (run(1.0) - run(-1.0)) / (2.0 * h);
    let err = (fd - g.controller[i]).abs() / fd.abs().max(g.controller[i].abs()).max(1e-10);
    assert!(err < 1e-2, "{name}: controller fd {fd} vs analytic {}", g.controller[i]);
}

#[test]
fn crawling_gradients() {
    check(TaskName::Crawling);
}

#[test]
fn balancing_gradients() {
    check(TaskName::Balancing);
}

#[test]
fn landing_gradients() {
    check(TaskName::Landing);
}

#[test]
fn gripping_gradients() {
    check(TaskName::Gripping);
}

#[test]
fn box_moving_gradients() {
    check(TaskName::BoxMoving);
}
