//! The six task environments: scene assembly around a robot design, the
//! prescribed controllers, metrics and differentiable losses.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mpmsim::{self, Controller, FrameGrads, MpmConfig, Rect, Role, Scene, SimGradients, Trace};
use crate::robotize::{ActuatorLayout, RobotDesign};

/// Performance assigned to designs that cannot be robotized or simulated.
pub const SENTINEL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Balancing,
    Landing,
    Crawling,
    Hurdling,
    Gripping,
    BoxMoving,
}

impl TaskName {
    pub const ALL: [TaskName; 6] = [
        TaskName::Balancing,
        TaskName::Landing,
        TaskName::Crawling,
        TaskName::Hurdling,
        TaskName::Gripping,
        TaskName::BoxMoving,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Balancing => "balancing",
            TaskName::Landing => "landing",
            TaskName::Crawling => "crawling",
            TaskName::Hurdling => "hurdling",
            TaskName::Gripping => "gripping",
            TaskName::BoxMoving => "box_moving",
        }
    }

    /// Tasks without actuators.
    pub fn is_passive(self) -> bool {
        matches!(self, TaskName::Balancing | TaskName::Landing)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s.replace('-', "_"))
            .ok_or_else(|| invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Iou,
    LandingDistance,
    TravelDistance,
    ObjectLift,
    ObjectLeftward,
}

/// A dynamic block placed in the scene (gripped object, box).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub size: [f64; 2],
    /// Center of the bottom edge; `None` y means "rest on the robot top".
    pub anchor_x: f64,
    pub bottom: Option<f64>,
    pub per_side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    /// Size of the design workspace.
    pub workspace: [f64; 2],
    /// World position of the workspace's lower-left corner.
    pub robot_origin: [f64; 2],
    pub initial_velocity: [f64; 2],
    pub colliders: Vec<Rect>,
    pub actuators: Option<ActuatorLayout>,
    pub controller: Controller,
    pub metric: Metric,
    pub target: Option<[f64; 2]>,
    pub object: Option<ObjectSpec>,
    /// Glued block the gripper fingers hang from.
    pub base: Option<Rect>,
    /// Gap between each finger's inner edge and the gripper axis.
    pub finger_gap: f64,
}

fn ramp(steps: usize, from: usize, to: usize, a: f64, b: f64, s: usize) -> f64 {
    let _ = steps;
    if s < from || s > to || to == from {
        return if s == from { a } else { 0.0 };
    }
    a + (b - a) * (s - from) as f64 / (to - from) as f64
}

/// Builds the environment for `name` on the given simulator configuration.
pub fn build_task(name: TaskName, cfg: &MpmConfig) -> TaskSpec {
    let g = cfg.ground_y();
    let steps = cfg.control_steps;
    let mut t = TaskSpec {
        name,
        workspace: [0.08, 0.08],
        robot_origin: [0.46, g],
        initial_velocity: [0.0, 0.0],
        colliders: Vec::new(),
        actuators: None,
        controller: Controller::passive(),
        metric: Metric::TravelDistance,
        target: None,
        object: None,
        base: None,
        finger_gap: 0.0,
    };
    match name {
        TaskName::Balancing => {
            t.colliders.push(Rect {
                min: [0.49, g],
                max: [0.51, g + 0.05],
            });
            t.robot_origin = [0.46, g + 0.05];
            t.initial_velocity = [0.0, 0.5];
            t.metric = Metric::Iou;
        }
        TaskName::Landing => {
            let target = [0.3, g + 0.025];
            t.target = Some(target);
            t.robot_origin = [target[0] + 0.08 - 0.04, target[1] + 0.045];
            t.initial_velocity = [0.5, 0.0];
            t.metric = Metric::LandingDistance;
        }
        TaskName::Crawling => {
            t.actuators = Some(ActuatorLayout {
                count: 4,
                axes: vec![0],
                fiber: [0.0, 1.0],
            });
            t.controller = Controller::Sine {
                amp: vec![0.3; 4],
                freq: vec![30.0; 4],
                phase: vec![0.5 * PI, 1.5 * PI, 0.0, PI],
                bias: vec![0.0; 4],
            };
        }
        TaskName::Hurdling => {
            t.robot_origin = [0.3, g];
            let front = t.robot_origin[0] + 0.04 + 0.07;
            t.colliders.push(Rect {
                min: [front, g],
                max: [front + 0.01, g + 0.03],
            });
            t.actuators = Some(ActuatorLayout {
                count: 2,
                axes: vec![0],
                fiber: [0.0, 1.0],
            });
            // Actuator 1 is the one nearer the obstacle.
            let values = (0..steps.min(30))
                .map(|s| {
                    let f = s as f64 / 29.0;
                    vec![0.3 * f, 1.0 * f]
                })
                .collect();
            t.controller = Controller::Sequence {
                actuators: 2,
                values,
            };
        }
        TaskName::Gripping => {
            let cx = 0.5;
            let top = g + 0.015 + 0.08;
            t.robot_origin = [cx - 0.02 - 0.08, top - 0.08];
            t.finger_gap = 0.02;
            t.base = Some(Rect {
                min: [cx - 0.1, top],
                max: [cx + 0.1, top + 0.03],
            });
            t.object = Some(ObjectSpec {
                size: [0.03, 0.03],
                anchor_x: cx,
                bottom: Some(g),
                per_side: 8,
            });
            t.actuators = Some(ActuatorLayout {
                count: 2,
                axes: vec![0],
                fiber: [0.0, 1.0],
            });
            // Left finger: id 0 is the outer half, id 1 the inner half.
            let half = steps / 2;
            let values = (0..steps)
                .map(|s| {
                    if s < half {
                        vec![0.0, ramp(steps, 0, half - 1, 0.0, 1.0, s)]
                    } else {
                        vec![ramp(steps, half, steps - 1, 1.0, 0.0, s), 0.0]
                    }
                })
                .collect();
            t.controller = Controller::Sequence {
                actuators: 2,
                values,
            };
            t.metric = Metric::ObjectLift;
        }
        TaskName::BoxMoving => {
            t.workspace = [0.16, 0.06];
            t.robot_origin = [0.42, g];
            t.object = Some(ObjectSpec {
                size: [0.03, 0.03],
                anchor_x: 0.58,
                bottom: None,
                per_side: 8,
            });
            t.actuators = Some(ActuatorLayout {
                count: 2,
                axes: vec![1],
                fiber: [1.0, 0.0],
            });
            // Lower actuator (id 0) ramps up over the horizon; upper stays off.
            let values = (0..steps)
                .map(|s| vec![ramp(steps, 0, steps - 1, 0.0, 1.0, s), 0.0])
                .collect();
            t.controller = Controller::Sequence {
                actuators: 2,
                values,
            };
            t.metric = Metric::ObjectLeftward;
        }
    }
    t
}

/// Where each design particle ended up in the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMap {
    /// Scene index of design particle `i`.
    pub primary: Vec<usize>,
    /// Scene index of the mirrored copy of design particle `i`, if any.
    pub mirror: Vec<Option<usize>>,
    /// Rightmost and topmost design particles, which fix the translation
    /// applied to the whole robot. Ties share the gradient evenly.
    pub align: Option<[Vec<usize>; 2]>,
    /// Design particles the object rests on, with the object's scene indices.
    pub rest: Option<(Vec<usize>, std::ops::Range<usize>)>,
}

impl SceneMap {
    /// Collapses a scene-level position gradient onto the design particles.
    pub fn design_grad(&self, g: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = self
            .primary
            .iter()
            .zip(&self.mirror)
            .map(|(&p, m)| {
                let mut out = g[p];
                if let Some(m) = m {
                    out[0] -= g[*m][0];
                    out[1] += g[*m][1];
                }
                out
            })
            .collect();
        if let Some((support, range)) = &self.rest {
            let s = g[range.clone()].iter().map(|v| v[1]).sum::<f64>() / support.len() as f64;
            for &k in support {
                out[k][1] += s;
            }
        }
        if let Some([right, top]) = &self.align {
            let sx = out.iter().map(|v| v[0]).sum::<f64>() / right.len() as f64;
            let sy = out.iter().map(|v| v[1]).sum::<f64>() / top.len() as f64;
            for &k in right {
                out[k][0] -= sx;
            }
            for &k in top {
                out[k][1] -= sy;
            }
        }
        out
    }

    /// Collapses a scene-level per-particle weight gradient onto the design.
    pub fn design_scale_grad(&self, g: &[f64]) -> Vec<f64> {
        self.primary
            .iter()
            .zip(&self.mirror)
            .map(|(&p, m)| g[p] + m.map_or(0.0, |m| g[m]))
            .collect()
    }
}

fn lattice(min: [f64; 2], size: [f64; 2], per_side: usize) -> (Vec<[f64; 2]>, f64) {
    let sx = size[0] / per_side as f64;
    let sy = size[1] / per_side as f64;
    let mut pts = Vec::with_capacity(per_side * per_side);
    for i in 0..per_side {
        for j in 0..per_side {
            pts.push([min[0] + (i as f64 + 0.5) * sx, min[1] + (j as f64 + 0.5) * sy]);
        }
    }
    (pts, sx * sy)
}

impl TaskSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Places the robot (and any object, base or mirrored finger) in the world.
    /// `scale` optionally weights each design particle's mass and volume.
    pub fn build_scene(
        &self,
        points: &[[f64; 2]],
        actuator: &[Option<usize>],
        fibers: &[[f64; 2]],
        particle_volume: f64,
        scale: Option<&[f64]>,
    ) -> Result<(Scene, SceneMap)> {
        if points.is_empty() {
            return Err(Error::DegenerateGeometry("design has no particles".into()));
        }
        if actuator.len() != points.len() {
            return Err(invalid("actuator labels do not match the particles"));
        }
        let half = particle_volume.sqrt() / 2.0;
        let mut world: Vec<[f64; 2]> = points
            .iter()
            .map(|p| [p[0] + self.robot_origin[0], p[1] + self.robot_origin[1]])
            .collect();
        let mut align = None;
        if let Some(base) = &self.base {
            // Right-align the finger against the gripper axis gap.
            let extreme = |axis: usize| {
                let m = world.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..world.len()).filter(|&i| world[i][axis] == m).collect();
                (m, ties)
            };
            let (right, right_ties) = extreme(0);
            let (top, top_ties) = extreme(1);
            align = Some([right_ties, top_ties]);
            let (right, top) = (right + half, top + half);
            let axis = (base.min[0] + base.max[0]) / 2.0;
            let dx = axis - self.finger_gap - right;
            let dy = base.min[1] - top;
            for p in &mut world {
                p[0] += dx;
                p[1] += dy;
            }
        }
        let m = world.len();
        let ones = vec![1.0; m];
        let scale = scale.unwrap_or(&ones);
        let mut sc = Scene {
            positions: world.clone(),
            velocities: vec![self.initial_velocity; m],
            particle_volume,
            scale: scale.to_vec(),
            actuator: actuator.to_vec(),
            role: vec![Role::Robot; m],
            fibers: fibers.to_vec(),
            colliders: self.colliders.clone(),
        };
        let mut map = SceneMap {
            primary: (0..m).collect(),
            mirror: vec![None; m],
            align,
            rest: None,
        };
        if let Some(base) = &self.base {
            let axis = (base.min[0] + base.max[0]) / 2.0;
            for i in 0..m {
                map.mirror[i] = Some(sc.len());
                sc.positions.push([2.0 * axis - world[i][0], world[i][1]]);
                sc.velocities.push(self.initial_velocity);
                sc.scale.push(scale[i]);
                sc.actuator.push(actuator[i]);
                sc.role.push(Role::Robot);
            }
            let n = ((base.max[0] - base.min[0]) / (2.0 * half)).round().max(1.0) as usize;
            let rows = ((base.max[1] - base.min[1]) / (2.0 * half)).round().max(1.0) as usize;
            let sx = (base.max[0] - base.min[0]) / n as f64;
            let sy = (base.max[1] - base.min[1]) / rows as f64;
            for i in 0..n {
                for j in 0..rows {
                    sc.positions.push([base.min[0] + (i as f64 + 0.5) * sx, base.min[1] + (j as f64 + 0.5) * sy]);
                    sc.velocities.push([0.0; 2]);
                    // Mass of the base is irrelevant: its nodes are pinned.
                    sc.scale.push(sx * sy / particle_volume);
                    sc.actuator.push(None);
                    sc.role.push(Role::Base);
                }
            }
        }
        if let Some(obj) = &self.object {
            let mut support = None;
            let bottom = match obj.bottom {
                Some(b) => b,
                None => {
                    let lo = obj.anchor_x - obj.size[0] / 2.0;
                    let hi = obj.anchor_x + obj.size[0] / 2.0;
                    let under = |p: &[f64; 2]| p[0] >= lo - half && p[0] <= hi + half;
                    let top = world.iter().filter(|p| under(p)).map(|p| p[1] + half).fold(f64::NEG_INFINITY, f64::max);
                    if top > self.robot_origin[1] {
                        support = Some((0..world.len()).filter(|&i| under(&world[i]) && world[i][1] + half == top).collect());
                        top
                    } else {
                        self.robot_origin[1]
                    }
                }
            };
            let (pts, vol) = lattice(
                [obj.anchor_x - obj.size[0] / 2.0, bottom],
                obj.size,
                obj.per_side,
            );
            let first = sc.len();
            if let Some(support) = support {
                map.rest = Some((support, first..first + pts.len()));
            }
            for p in pts {
                sc.positions.push(p);
                sc.velocities.push([0.0; 2]);
                sc.scale.push(vol / particle_volume);
                sc.actuator.push(None);
                sc.role.push(Role::Object);
            }
        }
        sc.validate()?;
        Ok((sc, map))
    }

    pub fn scene_for(&self, design: &RobotDesign) -> Result<(Scene, SceneMap)> {
        self.build_scene(
            &design.solid_points,
            &design.actuator_id,
            &design.fibers,
            design.particle_volume,
            None,
        )
    }

    /// Controller matching this task's actuator count.
    pub fn prescribed_controller(&self) -> Controller {
        self.controller.clone()
    }
}

fn robot_weights(scene: &Scene) -> Vec<f64> {
    scene
        .role
        .iter()
        .zip(&scene.scale)
        .map(|(r, s)| if *r == Role::Robot { *s } else { 0.0 })
        .collect()
}

fn object_weights(scene: &Scene) -> Vec<f64> {
    scene
        .role
        .iter()
        .map(|r| if *r == Role::Object { 1.0 } else { 0.0 })
        .collect()
}

fn weighted_centroid(frame: &[[f64; 2]], w: &[f64]) -> Option<[f64; 2]> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut c = [0.0; 2];
    for (p, wi) in frame.iter().zip(w) {
        c[0] += wi * p[0];
        c[1] += wi * p[1];
    }
    Some([c[0] / total, c[1] / total])
}

/// IoU of the grid cells occupied by the weighted particles in two frames.
pub fn hard_iou(a: &[[f64; 2]], b: &[[f64; 2]], w: &[f64], dx: f64) -> f64 {
    use std::collections::BTreeSet;
    let cells = |f: &[[f64; 2]]| -> BTreeSet<(i64, i64)> {
        f.iter()
            .zip(w)
            .filter(|(_, wi)| **wi > 0.5)
            .map(|(p, _)| ((p[0] / dx).floor() as i64, (p[1] / dx).floor() as i64))
            .collect()
    };
    let (ca, cb) = (cells(a), cells(b));
    let union = ca.union(&cb).count();
    if union == 0 {
        return 0.0;
    }
    ca.intersection(&cb).count() as f64 / union as f64
}

/// Gaussian-splatted occupancy `1 - exp(-rho)` on cell centers.
fn splat(frame: &[[f64; 2]], w: &[f64], dx: f64, lo: [i64; 2], dims: [usize; 2]) -> Vec<f64> {
    let s2 = 2.0 * dx * dx;
    let mut rho = vec![0.0; dims[0] * dims[1]];
    for (p, wi) in frame.iter().zip(w) {
        if *wi == 0.0 {
            continue;
        }
        for i in 0..dims[0] {
            let cx = (lo[0] + i as i64) as f64 * dx + dx / 2.0;
            let ex = (-(p[0] - cx).powi(2) / s2).exp();
            if ex < 1e-12 {
                continue;
            }
            for j in 0..dims[1] {
                let cy = (lo[1] + j as i64) as f64 * dx + dx / 2.0;
                rho[i * dims[1] + j] += wi * ex * (-(p[1] - cy).powi(2) / s2).exp();
            }
        }
    }
    rho
}

struct SoftIou {
    value: f64,
    grad_a: Vec<[f64; 2]>,
    grad_b: Vec<[f64; 2]>,
}

/// `sum min(o_a, o_b) / sum max(o_a, o_b)` with its position gradients.
fn soft_iou(a: &[[f64; 2]], b: &[[f64; 2]], w: &[f64], dx: f64) -> SoftIou {
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for (p, wi) in a.iter().chain(b).zip(w.iter().chain(w)) {
        if *wi == 0.0 {
            continue;
        }
        for d in 0..2 {
            let c = (p[d] / dx).floor() as i64;
            lo[d] = lo[d].min(c - 5);
            hi[d] = hi[d].max(c + 5);
        }
    }
    if lo[0] > hi[0] {
        return SoftIou {
            value: 0.0,
            grad_a: vec![[0.0; 2]; a.len()],
            grad_b: vec![[0.0; 2]; b.len()],
        };
    }
    let dims = [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize];
    let ra = splat(a, w, dx, lo, dims);
    let rb = splat(b, w, dx, lo, dims);
    let (mut inter, mut union) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (oa, ob) = (1.0 - (-x).exp(), 1.0 - (-y).exp());
        inter += oa.min(ob);
        union += oa.max(ob);
    }
    let value = if union > 0.0 { inter / union } else { 0.0 };
    // d value / d o for each frame; ties split the derivative evenly.
    let mut ga = vec![0.0; ra.len()];
    let mut gb = vec![0.0; rb.len()];
    if union > 0.0 {
        for k in 0..ra.len() {
            let (oa, ob) = (1.0 - (-ra[k]).exp(), 1.0 - (-rb[k]).exp());
            let (da_min, db_min, da_max, db_max) = if oa < ob {
                (1.0, 0.0, 0.0, 1.0)
            } else if oa > ob {
                (0.0, 1.0, 1.0, 0.0)
            } else {
                (0.5, 0.5, 0.5, 0.5)
            };
            let dmin = 1.0 / union;
            let dmax = -inter / (union * union);
            ga[k] = (da_min * dmin + da_max * dmax) * (-ra[k]).exp();
            gb[k] = (db_min * dmin + db_max * dmax) * (-rb[k]).exp();
        }
    }
    let back = |frame: &[[f64; 2]], g: &[f64]| -> Vec<[f64; 2]> {
        let s2 = 2.0 * dx * dx;
        frame
            .iter()
            .zip(w)
            .map(|(p, wi)| {
                let mut out = [0.0; 2];
                if *wi == 0.0 {
                    return out;
                }
                for i in 0..dims[0] {
                    let cx = (lo[0] + i as i64) as f64 * dx + dx / 2.0;
                    let ex = (-(p[0] - cx).powi(2) / s2).exp();
                    if ex < 1e-12 {
                        continue;
                    }
                    for j in 0..dims[1] {
                        let cy = (lo[1] + j as i64) as f64 * dx + dx / 2.0;
                        let k = wi * ex * (-(p[1] - cy).powi(2) / s2).exp() * g[i * dims[1] + j];
                        out[0] += k * -(p[0] - cx) / (dx * dx);
                        out[1] += k * -(p[1] - cy) / (dx * dx);
                    }
                }
                out
            })
            .collect()
    };
    SoftIou {
        value,
        grad_a: back(a, &ga),
        grad_b: back(b, &gb),
    }
}

/// Task performance of a finished rollout (higher is better).
pub fn metric(task: &TaskSpec, scene: &Scene, trace: &Trace, cfg: &MpmConfig) -> Result<f64> {
    if trace.frames.len() < 2 {
        return Err(invalid("trace needs at least two frames"));
    }
    let rw = robot_weights(scene);
    let ow = object_weights(scene);
    let (first, last) = (trace.first(), trace.last());
    let need = |c: Option<[f64; 2]>| c.ok_or_else(|| Error::DegenerateGeometry("no particles to measure".into()));
    Ok(match task.metric {
        Metric::Iou => hard_iou(first, last, &rw, cfg.dx()),
        Metric::LandingDistance => {
            let c = need(weighted_centroid(last, &rw))?;
            let t = task.target.ok_or_else(|| invalid("landing task without target"))?;
            (-((c[0] - t[0]).powi(2) + (c[1] - t[1]).powi(2)).sqrt()).exp()
        }
        Metric::TravelDistance => {
            (need(weighted_centroid(last, &rw))?[0] - need(weighted_centroid(first, &rw))?[0]).abs()
        }
        Metric::ObjectLift => need(weighted_centroid(last, &ow))?[1] - need(weighted_centroid(first, &ow))?[1],
        Metric::ObjectLeftward => need(weighted_centroid(first, &ow))?[0] - need(weighted_centroid(last, &ow))?[0],
    })
}

/// Differentiable loss: the value, its gradient with respect to the trace
/// frames, and its explicit gradient with respect to the particle weights
/// (`scene.scale`).
pub struct LossOutput {
    pub value: f64,
    pub frames: FrameGrads,
    pub weights: Vec<f64>,
}

/// `-performance`, using a soft IoU for balancing.
pub fn task_loss(task: &TaskSpec, scene: &Scene, trace: &Trace, cfg: &MpmConfig) -> Result<LossOutput> {
    let n = scene.len();
    let h = trace.frames.len() - 1;
    let rw = robot_weights(scene);
    let ow = object_weights(scene);
    let (first, last) = (trace.first(), trace.last());
    let mut g0 = vec![[0.0; 2]; n];
    let mut gh = vec![[0.0; 2]; n];
    let mut gw = vec![0.0; n];
    let total_r: f64 = rw.iter().sum();
    let total_o: f64 = ow.iter().sum();
    let need = |c: Option<[f64; 2]>| c.ok_or_else(|| Error::DegenerateGeometry("no particles to measure".into()));
    let value = match task.metric {
        Metric::Iou => {
            let s = soft_iou(first, last, &rw, cfg.dx());
            for i in 0..n {
                g0[i] = [-s.grad_a[i][0], -s.grad_a[i][1]];
                gh[i] = [-s.grad_b[i][0], -s.grad_b[i][1]];
            }
            -s.value
        }
        Metric::LandingDistance => {
            let c = need(weighted_centroid(last, &rw))?;
            let t = task.target.ok_or_else(|| invalid("landing task without target"))?;
            let d = ((c[0] - t[0]).powi(2) + (c[1] - t[1]).powi(2)).sqrt();
            let e = (-d).exp();
            if d > 0.0 {
                let dc = [e * (c[0] - t[0]) / d, e * (c[1] - t[1]) / d];
                for i in 0..n {
                    gh[i] = [dc[0] * rw[i] / total_r, dc[1] * rw[i] / total_r];
                    if rw[i] != 0.0 {
                        gw[i] = (dc[0] * (last[i][0] - c[0]) + dc[1] * (last[i][1] - c[1])) / total_r;
                    }
                }
            }
            -e
        }
        Metric::TravelDistance => {
            let c0 = need(weighted_centroid(first, &rw))?;
            let ch = need(weighted_centroid(last, &rw))?;
            let d = ch[0] - c0[0];
            let sgn = if d >= 0.0 { 1.0 } else { -1.0 };
            for i in 0..n {
                gh[i][0] = -sgn * rw[i] / total_r;
                g0[i][0] = sgn * rw[i] / total_r;
                if rw[i] != 0.0 {
                    gw[i] = -sgn * ((last[i][0] - ch[0]) - (first[i][0] - c0[0])) / total_r;
                }
            }
            -d.abs()
        }
        Metric::ObjectLift => {
            let c0 = need(weighted_centroid(first, &ow))?;
            let ch = need(weighted_centroid(last, &ow))?;
            for i in 0..n {
                gh[i][1] = -ow[i] / total_o;
                g0[i][1] = ow[i] / total_o;
            }
            -(ch[1] - c0[1])
        }
        Metric::ObjectLeftward => {
            let c0 = need(weighted_centroid(first, &ow))?;
            let ch = need(weighted_centroid(last, &ow))?;
            for i in 0..n {
                gh[i][0] = ow[i] / total_o;
                g0[i][0] = -ow[i] / total_o;
            }
            ch[0] - c0[0]
        }
    };
    Ok(LossOutput {
        value,
        frames: FrameGrads {
            frames: vec![(0, g0), (h, gh)],
        },
        weights: gw,
    })
}

/// Forward rollout of a design on a task; returns performance and trace.
pub fn simulate(
    task: &TaskSpec,
    design: &RobotDesign,
    ctrl: &Controller,
    cfg: &MpmConfig,
) -> Result<(f64, Scene, Trace)> {
    let (scene, _) = task.scene_for(design)?;
    let trace = mpmsim::rollout(&scene, ctrl, cfg)?;
    let perf = metric(task, &scene, &trace, cfg)?;
    Ok((perf, scene, trace))
}

/// Forward rollout of an assembled scene; returns the task metric.
pub fn rollout_task(task: &TaskSpec, scene: &Scene, ctrl: &Controller, cfg: &MpmConfig) -> Result<f64> {
    let trace = mpmsim::rollout(scene, ctrl, cfg)?;
    metric(task, scene, &trace, cfg)
}

/// Performance with failures mapped to [`SENTINEL`].
pub fn performance_or_sentinel(r: Result<f64>) -> f64 {
    match r {
        Ok(v) if v.is_finite() => v,
        Ok(_) => SENTINEL,
        Err(e) => {
            log::debug!("evaluation failed: {e}");
            SENTINEL
        }
    }
}

/// Loss gradients for one design/controller pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub performance: f64,
    pub loss: f64,
    /// Gradient with respect to the design's workspace-local particle positions.
    pub design: Vec<[f64; 2]>,
    pub controller: Vec<f64>,
    pub sim: SimGradients,
}

pub fn rollout_task_grad(
    task: &TaskSpec,
    design: &RobotDesign,
    ctrl: &Controller,
    cfg: &MpmConfig,
) -> Result<TaskGradient> {
    let (scene, map) = task.scene_for(design)?;
    scene_grad(task, &scene, &map, ctrl, cfg)
}

/// Like [`rollout_task_grad`] for an already assembled scene; the returned
/// `sim.scale` includes the loss's explicit dependence on particle weights.
pub fn scene_grad(
    task: &TaskSpec,
    scene: &Scene,
    map: &SceneMap,
    ctrl: &Controller,
    cfg: &MpmConfig,
) -> Result<TaskGradient> {
    let mut explicit = Vec::new();
    let (loss, trace, mut sim) = mpmsim::rollout_grad(scene, ctrl, cfg, |t| {
        let out = task_loss(task, scene, t, cfg)?;
        explicit = out.weights;
        Ok((out.value, out.frames))
    })?;
    for (s, e) in sim.scale.iter_mut().zip(&explicit) {
        *s += e;
    }
    let performance = metric(task, scene, &trace, cfg)?;
    Ok(TaskGradient {
        performance,
        loss,
        design: map.design_grad(&sim.positions),
        controller: sim.controller.clone(),
        sim,
    })
}

/// Per-control-step CSV of robot and object centroids.
pub fn trace_csv(scene: &Scene, trace: &Trace) -> String {
    let rw = robot_weights(scene);
    let ow = object_weights(scene);
    let mut s = String::from("step,robot_x,robot_y,object_x,object_y\n");
    for (k, f) in trace.frames.iter().enumerate() {
        let r = weighted_centroid(f, &rw).unwrap_or([f64::NAN; 2]);
        let o = weighted_centroid(f, &ow);
        match o {
            Some(o) => s += &format!("{k},{},{},{},{}\n", r[0], r[1], o[0], o[1]),
            None => s += &format!("{k},{},{},,\n", r[0], r[1]),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_block(origin: [f64; 2], n: usize, sp: f64) -> Vec<[f64; 2]> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push([origin[0] + (i as f64 + 0.5) * sp, origin[1] + (j as f64 + 0.5) * sp]);
            }
        }
        v
    }

    #[test]
    fn task_examples() {
        let cfg = MpmConfig::default();
        assert_eq!(build_task(TaskName::Crawling, &cfg).actuators.unwrap().count, 4);
        let b = build_task(TaskName::Balancing, &cfg);
        assert!(b.actuators.is_none());
        assert_eq!(b.controller, Controller::passive());
        let h = build_task(TaskName::Hurdling, &cfg);
        let dt = cfg.control_dt();
        assert_eq!(h.controller.eval(0, dt), vec![0.0, 0.0]);
        let a = h.controller.eval(29, dt);
        assert!((a[0] - 0.3).abs() < 1e-15 && (a[1] - 1.0).abs() < 1e-15);
        assert_eq!(h.controller.eval(30, dt), vec![0.0, 0.0]);
        assert_eq!(h.controller.eval(99, dt), vec![0.0, 0.0]);
        for t in TaskName::ALL {
            assert_eq!(t.as_str().parse::<TaskName>().unwrap(), t);
        }
    }

    #[test]
    fn iou_examples() {
        let dx = 0.1;
        let w = vec![1.0; 4];
        let a = frame_block([0.0, 0.0], 2, 0.1);
        assert_eq!(hard_iou(&a, &a, &w, dx), 1.0);
        let far = frame_block([1.0, 1.0], 2, 0.1);
        assert_eq!(hard_iou(&a, &far, &w, dx), 0.0);
        let half = frame_block([0.1, 0.0], 2, 0.1);
        assert!((hard_iou(&a, &half, &w, dx) - 1.0 / 3.0).abs() < 1e-15);
        let s = soft_iou(&a, &a, &w, dx);
        assert!((s.value - 1.0).abs() < 0.05);
    }

    #[test]
    fn soft_iou_gradient_matches_fd() {
        let dx = 1.0 / 64.0;
        let a = frame_block([0.5, 0.1], 4, 0.004);
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 0.006, p[1] - 0.002]).collect();
        let w = vec![1.0; a.len()];
        let s = soft_iou(&a, &b, &w, dx);
        let h = 1e-7;
        for i in [0, 5, 15] {
            for d in 0..2 {
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[i][d] += h;
                bm[i][d] -= h;
                let fd = (soft_iou(&a, &bp, &w, dx).value - soft_iou(&a, &bm, &w, dx).value) / (2.0 * h);
                assert!((fd - s.grad_b[i][d]).abs() < 1e-5 * (1.0 + fd.abs()), "{i} {d}: {fd} vs {}", s.grad_b[i][d]);
            }
        }
    }

    fn trace_of(frames: Vec<Vec<[f64; 2]>>) -> Trace {
        Trace {
            frames,
            inverted_substeps: 0,
        }
    }

    fn scene_of(robot: usize, object: usize) -> Scene {
        let n = robot + object;
        let mut role = vec![Role::Robot; robot];
        role.extend(vec![Role::Object; object]);
        Scene {
            positions: vec![[0.5, 0.5]; n],
            velocities: vec![[0.0; 2]; n],
            particle_volume: 1e-5,
            scale: vec![1.0; n],
            actuator: vec![None; n],
            role,
            fibers: vec![],
            colliders: vec![],
        }
    }

    #[test]
    fn displacement_metrics_and_losses() {
        let cfg = MpmConfig::default();
        let crawl = build_task(TaskName::Crawling, &cfg);
        let sc = scene_of(4, 0);
        let f0 = frame_block([0.4, 0.1], 2, 0.01);
        let moved: Vec<[f64; 2]> = f0.iter().map(|p| [p[0] + 0.05, p[1]]).collect();
        let still = trace_of(vec![f0.clone(), f0.clone()]);
        assert_eq!(metric(&crawl, &sc, &still, &cfg).unwrap(), 0.0);
        let tr = trace_of(vec![f0.clone(), moved]);
        let m = metric(&crawl, &sc, &tr, &cfg).unwrap();
        assert!((m - 0.05).abs() < 1e-12);
        let l = task_loss(&crawl, &sc, &tr, &cfg).unwrap();
        assert_eq!(l.value, -m);
        let gh = &l.frames.frames[1].1;
        assert!(gh.iter().all(|g| (g[0] + 0.25).abs() < 1e-15));

        let grip = build_task(TaskName::Gripping, &cfg);
        let so = scene_of(1, 4);
        let mut a = vec![[0.1, 0.1]];
        a.extend(frame_block([0.5, 0.1], 2, 0.01));
        let up: Vec<[f64; 2]> = a.iter().map(|p| [p[0], p[1] + 0.02]).collect();
        let down: Vec<[f64; 2]> = a.iter().map(|p| [p[0], p[1] - 0.01]).collect();
        assert_eq!(metric(&grip, &so, &trace_of(vec![a.clone(), a.clone()]), &cfg).unwrap(), 0.0);
        assert!((metric(&grip, &so, &trace_of(vec![a.clone(), up]), &cfg).unwrap() - 0.02).abs() < 1e-12);
        assert!(metric(&grip, &so, &trace_of(vec![a.clone(), down]), &cfg).unwrap() < 0.0);

        let boxm = build_task(TaskName::BoxMoving, &cfg);
        let right: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 0.01, p[1]]).collect();
        assert!(metric(&boxm, &so, &trace_of(vec![a.clone(), right]), &cfg).unwrap() < 0.0);
    }

    #[test]
    fn landing_metric_examples() {
        let cfg = MpmConfig::default();
        let land = build_task(TaskName::Landing, &cfg);
        let t = land.target.unwrap();
        let sc = scene_of(1, 0);
        let at = |d: f64| trace_of(vec![vec![[0.0, 0.0]], vec![[t[0] + d, t[1]]]]);
        assert!((metric(&land, &sc, &at(0.0), &cfg).unwrap() - 1.0).abs() < 1e-15);
        assert!((metric(&land, &sc, &at(2f64.ln()), &cfg).unwrap() - 0.5).abs() < 1e-12);
        assert!((metric(&land, &sc, &at(0.1), &cfg).unwrap() - 0.9048374180359595).abs() < 1e-12);
    }

    #[test]
    fn mirror_gradient_mapping() {
        let map = SceneMap {
            primary: vec![0],
            mirror: vec![Some(1)],
            align: None,
            rest: None,
        };
        assert_eq!(map.design_grad(&[[1.0, 2.0], [3.0, 4.0]]), vec![[-2.0, 6.0]]);
    }

    #[test]
    fn loss_monotone_in_metric() {
        use rand::Rng as _;
        let cfg = MpmConfig::default();
        let mut r = crate::rng::seeded(1);
        for name in TaskName::ALL {
            let task = build_task(name, &cfg);
            let sc = scene_of(9, 4);
            for _ in 0..100 {
                let f0: Vec<[f64; 2]> = (0..13).map(|_| [0.3 + 0.1 * r.random::<f64>(), 0.1 + 0.1 * r.random::<f64>()]).collect();
                let fh: Vec<[f64; 2]> = f0.iter().map(|p| [p[0] + 0.05 * (r.random::<f64>() - 0.5), p[1] + 0.05 * (r.random::<f64>() - 0.5)]).collect();
                let tr = trace_of(vec![f0, fh]);
                let m = metric(&task, &sc, &tr, &cfg).unwrap();
                let l = task_loss(&task, &sc, &tr, &cfg).unwrap().value;
                if name != TaskName::Balancing {
                    assert!((l + m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn soft_iou_tracks_rigid_shifts() {
        let cfg = MpmConfig::default();
        let task = build_task(TaskName::Balancing, &cfg);
        let sc = scene_of(64, 0);
        let f0 = frame_block([0.46, 0.1], 8, 0.01);
        let mut last = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..8 {
            let d = 0.008 * k as f64;
            let fh: Vec<[f64; 2]> = f0.iter().map(|p| [p[0] + d, p[1] - 0.5 * d]).collect();
            let tr = trace_of(vec![f0.clone(), fh]);
            let m = metric(&task, &sc, &tr, &cfg).unwrap();
            let l = task_loss(&task, &sc, &tr, &cfg).unwrap().value;
            assert!(m <= last.0 + 1e-12 && l > last.1, "shift {d}: iou {m}, loss {l}");
            last = (m, l);
        }
    }
}
