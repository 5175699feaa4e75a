mod common;

use common::block_scene;
use mfg_core::mpmsim::{p2g_momentum, rollout, Controller, MpmConfig, Role};
use mfg_core::rng;
use rand::Rng as _;

#[test]
fn p2g_conserves_momentum() {
    let cfg = MpmConfig {
        gravity: [0.0, 0.0],
        ..Default::default()
    };
    let mut s = block_scene([0.3, 0.4], 9, 7, cfg.dx() / 2.0);
    let mut r = rng::seeded(3);
    for (p, v) in s.positions.iter_mut().zip(s.velocities.iter_mut()) {
        p[0] += 0.002 * r.random::<f64>();
        *v = [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5];
    }
    for sc in &mut s.scale {
        *sc = 0.5 + r.random::<f64>();
    }
    let (grid, parts) = p2g_momentum(&s, &cfg, &[]).unwrap();
    for d in 0..2 {
        let rel = (grid[d] - parts[d]).abs() / parts[d].abs();
        assert!(rel <= 1e-10, "axis {d}: rel {rel}");
    }
}

#[test]
fn free_fall_is_exact() {
    for substeps in [1, 5, 17] {
        let cfg = MpmConfig {
            substeps,
            control_steps: 4,
            ..Default::default()
        };
        let s = block_scene([0.5, 0.7], 1, 1, 0.01);
        let t = rollout(&s, &Controller::passive(), &cfg).unwrap();
        // Position after n steps of symplectic Euler: y0 - g dt^2 n (n + 1) / 2.
        for (k, f) in t.frames.iter().enumerate() {
            let n = (k * substeps) as f64;
            let want = s.positions[0][1] - 9.8 * cfg.dt * cfg.dt * n * (n + 1.0) / 2.0;
            assert!((f[0][1] - want).abs() < 1e-12, "frame {k}");
            assert!((f[0][0] - s.positions[0][0]).abs() < 1e-15);
        }
    }
}

#[test]
fn free_fall_velocity_per_substep() {
    let cfg = MpmConfig {
        substeps: 1,
        control_steps: 50,
        ..Default::default()
    };
    let s = block_scene([0.5, 0.7], 1, 1, 0.01);
    let t = rollout(&s, &Controller::passive(), &cfg).unwrap();
    for n in 1..t.frames.len() {
        let v = (t.frames[n][0][1] - t.frames[n - 1][0][1]) / cfg.dt;
        assert!((v + 9.8 * n as f64 * cfg.dt).abs() < 1e-12, "substep {n}: v {v}");
    }
}

#[test]
fn mirror_symmetric_crawler_does_not_drift() {
    let cfg = MpmConfig::default();
    let sp = cfg.dx() / 2.0;
    let nx = 12;
    let mut s = block_scene([0.5 - nx as f64 * sp / 2.0, cfg.ground_y()], nx, 6, sp);
    for (i, p) in s.positions.iter().enumerate() {
        // Outer columns form actuator 0, inner columns actuator 1.
        s.actuator[i] = Some(usize::from((p[0] - 0.5).abs() < 3.0 * sp));
    }
    s.fibers = vec![[0.0, 1.0], [0.0, 1.0]];
    let ctrl = Controller::Sine {
        amp: vec![0.8, 0.8],
        freq: vec![30.0, 30.0],
        phase: vec![0.0, 1.5],
        bias: vec![0.0, 0.0],
    };
    let t = rollout(&s, &ctrl, &cfg).unwrap();
    let cx = |f: &[[f64; 2]]| f.iter().map(|p| p[0]).sum::<f64>() / f.len() as f64;
    let x0 = cx(t.first());
    for (k, f) in t.frames.iter().enumerate() {
        let drift = (cx(f) - x0).abs();
        assert!(drift <= 1e-6 * k.max(1) as f64, "step {k}: drift {drift}");
    }
}

#[test]
fn passive_block_rests_on_ground() {
    let cfg = MpmConfig::default();
    let sp = cfg.dx() / 2.0;
    let s = block_scene([0.45, cfg.ground_y()], 10, 4, sp);
    let t = rollout(&s, &Controller::passive(), &cfg).unwrap();
    let c0 = s.centroid_of(Role::Robot, t.first()).unwrap();
    let max_dev = t
        .frames
        .iter()
        .map(|f| {
            let c = s.centroid_of(Role::Robot, f).unwrap();
            ((c[0] - c0[0]).powi(2) + (c[1] - c0[1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    println!("max centroid deviation {max_dev:.3e}");
    assert!(max_dev <= 1e-3, "deviation {max_dev}");
}

#[test]
fn rollouts_are_bit_identical() {
    let cfg = MpmConfig {
        control_steps: 10,
        ..Default::default()
    };
    let mut s = block_scene([0.45, cfg.ground_y()], 8, 4, cfg.dx() / 2.0);
    s.actuator = vec![Some(0); s.len()];
    s.fibers = vec![[0.0, 1.0]];
    let ctrl = Controller::Sine {
        amp: vec![0.5],
        freq: vec![30.0],
        phase: vec![0.0],
        bias: vec![0.0],
    };
    assert_eq!(rollout(&s, &ctrl, &cfg).unwrap(), rollout(&s, &ctrl, &cfg).unwrap());
}
