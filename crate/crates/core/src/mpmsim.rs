//! Differentiable 2D MLS-MPM with muscle-fiber actuation.
//!
//! Quadratic B-spline transfers, fixed-corotated elasticity and APIC. The
//! reverse pass stores every substep's particle state and recomputes the grid
//! on the way back, so gradients are exact for the discrete scheme (up to the
//! piecewise branches of the boundary projections).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

type V2 = [f64; 2];
/// Row-major 2x2 matrix `[m00, m01, m10, m11]`.
type M2 = [f64; 4];

const I2: M2 = [1.0, 0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpmConfig {
    /// Grid cells per unit length; the domain is the unit square.
    pub grid_res: usize,
    pub dt: f64,
    pub substeps: usize,
    pub control_steps: usize,
    pub gravity: V2,
    pub density: f64,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// Peak fiber stress as a fraction of the Young's modulus.
    pub actuation_ratio: f64,
    pub friction: f64,
    /// Thickness of the wall/ground band, in cells.
    pub boundary_cells: usize,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self {
            grid_res: 64,
            dt: 1e-4,
            substeps: 17,
            control_steps: 100,
            gravity: [0.0, -9.8],
            density: 1e3,
            youngs_modulus: 1e4,
            poisson_ratio: 0.2,
            actuation_ratio: 1.0,
            friction: 0.4,
            boundary_cells: 3,
        }
    }
}

impl MpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_res < 2 * self.boundary_cells + 4 {
            return Err(Error::Config("grid too small for its boundary band".into()));
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Config("dt and substeps must be positive".into()));
        }
        if !(self.density > 0.0 && self.youngs_modulus > 0.0) {
            return Err(Error::Config("density and Young's modulus must be positive".into()));
        }
        if !(self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return Err(Error::Config("Poisson ratio must lie in (-1, 0.5)".into()));
        }
        let limit = 0.5 * self.dx() / (self.youngs_modulus / self.density).sqrt();
        if self.dt > limit {
            return Err(Error::Config(format!(
                "dt {} violates the CFL bound {limit:.3e}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.grid_res as f64
    }

    /// Wall-clock length of one control step.
    pub fn control_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    /// Height of the ground surface.
    pub fn ground_y(&self) -> f64 {
        self.boundary_cells as f64 * self.dx()
    }

    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.youngs_modulus, self.poisson_ratio);
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }

    pub fn actuation_stress(&self) -> f64 {
        self.actuation_ratio * self.youngs_modulus
    }
}

/// Axis-aligned static collider.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: V2,
    pub max: V2,
}

impl Rect {
    pub fn contains(&self, p: V2) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Robot,
    Object,
    /// Rigidly clamped part of the robot (pinned grid support).
    Base,
}

/// Everything the simulator needs about the bodies and the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub positions: Vec<V2>,
    pub velocities: Vec<V2>,
    /// Rest volume of one particle.
    pub particle_volume: f64,
    /// Per-particle multiplier on mass and volume (1 for solid material).
    pub scale: Vec<f64>,
    pub actuator: Vec<Option<usize>>,
    pub role: Vec<Role>,
    /// Unit fiber direction per actuator.
    pub fibers: Vec<V2>,
    pub colliders: Vec<Rect>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::DegenerateGeometry("scene has no particles".into()));
        }
        if self.velocities.len() != n
            || self.scale.len() != n
            || self.actuator.len() != n
            || self.role.len() != n
        {
            return Err(invalid("per-particle arrays disagree in length"));
        }
        if let Some(bad) = self.actuator.iter().flatten().find(|&&a| a >= self.fibers.len()) {
            return Err(invalid(format!("actuator id {bad} has no fiber")));
        }
        if !(self.particle_volume > 0.0) {
            return Err(invalid("particle volume must be positive"));
        }
        let finite = |v: &V2| v[0].is_finite() && v[1].is_finite();
        if !self.positions.iter().all(finite) || !self.velocities.iter().all(finite) {
            return Err(invalid("non-finite particle state"));
        }
        Ok(())
    }

    pub fn centroid_of(&self, role: Role, frame: &[V2]) -> Option<V2> {
        centroid(frame, |i| self.role[i] == role)
    }
}

pub(crate) fn centroid(frame: &[V2], keep: impl Fn(usize) -> bool) -> Option<V2> {
    let mut s = [0.0; 2];
    let mut n = 0usize;
    for (i, p) in frame.iter().enumerate() {
        if keep(i) {
            s[0] += p[0];
            s[1] += p[1];
            n += 1;
        }
    }
    (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64])
}

/// Open-loop actuation signal, one value per actuator and control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Controller {
    /// `bias + amp * sin(2 pi freq * step * control_dt + phase)`.
    Sine {
        amp: Vec<f64>,
        freq: Vec<f64>,
        phase: Vec<f64>,
        bias: Vec<f64>,
    },
    /// `values[step][actuator]`; steps past the table emit zeros.
    Sequence {
        actuators: usize,
        values: Vec<Vec<f64>>,
    },
}

impl Controller {
    pub fn passive() -> Self {
        Controller::Sequence {
            actuators: 0,
            values: Vec::new(),
        }
    }

    pub fn num_actuators(&self) -> usize {
        match self {
            Controller::Sine { amp, .. } => amp.len(),
            Controller::Sequence { actuators, .. } => *actuators,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Controller::Sine {
                amp,
                freq,
                phase,
                bias,
            } => {
                let k = amp.len();
                if freq.len() != k || phase.len() != k || bias.len() != k {
                    return Err(invalid("sine controller arrays disagree in length"));
                }
            }
            Controller::Sequence { actuators, values } => {
                if values.iter().any(|r| r.len() != *actuators) {
                    return Err(invalid("sequence rows must have one value per actuator"));
                }
            }
        }
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite controller parameter"));
        }
        Ok(())
    }

    /// Flat parameter vector (the optimization variable).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Controller::Sine {
                amp,
                freq,
                phase,
                bias,
            } => [amp, freq, phase, bias].into_iter().flatten().copied().collect(),
            Controller::Sequence { values, .. } => values.iter().flatten().copied().collect(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params().len() {
            return Err(invalid("controller parameter count mismatch"));
        }
        match self {
            Controller::Sine {
                amp,
                freq,
                phase,
                bias,
            } => {
                let k = amp.len();
                amp.copy_from_slice(&p[..k]);
                freq.copy_from_slice(&p[k..2 * k]);
                phase.copy_from_slice(&p[2 * k..3 * k]);
                bias.copy_from_slice(&p[3 * k..]);
            }
            Controller::Sequence { actuators, values } => {
                let k = (*actuators).max(1);
                for (row, chunk) in values.iter_mut().zip(p.chunks(k)) {
                    row.copy_from_slice(chunk);
                }
            }
        }
        Ok(())
    }

    fn raw(&self, step: usize, control_dt: f64, i: usize) -> f64 {
        match self {
            Controller::Sine {
                amp,
                freq,
                phase,
                bias,
            } => {
                let arg = 2.0 * std::f64::consts::PI * freq[i] * step as f64 * control_dt + phase[i];
                bias[i] + amp[i] * arg.sin()
            }
            Controller::Sequence { values, .. } => values.get(step).map_or(0.0, |r| r[i]),
        }
    }

    /// Actuation at a control step, clamped to `[-1, 1]`.
    pub fn eval(&self, step: usize, control_dt: f64) -> Vec<f64> {
        (0..self.num_actuators())
            .map(|i| self.raw(step, control_dt, i).clamp(-1.0, 1.0))
            .collect()
    }

    /// Accumulates `d<grad_a, eval(step)>/d params` into `out`.
    pub fn backward(&self, step: usize, control_dt: f64, grad_a: &[f64], out: &mut [f64]) {
        for (i, &g) in grad_a.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let r = self.raw(step, control_dt, i);
            if !(-1.0..=1.0).contains(&r) {
                continue;
            }
            match self {
                Controller::Sine {
                    amp, freq, phase, ..
                } => {
                    let k = amp.len();
                    let w = 2.0 * std::f64::consts::PI * step as f64 * control_dt;
                    let arg = w * freq[i] + phase[i];
                    let (s, c) = arg.sin_cos();
                    out[i] += g * s;
                    out[k + i] += g * amp[i] * c * w;
                    out[2 * k + i] += g * amp[i] * c;
                    out[3 * k + i] += g;
                }
                Controller::Sequence { actuators, values } => {
                    if step < values.len() {
                        out[step * actuators + i] += g;
                    }
                }
            }
        }
    }
}

/// Particle positions at every control step (frame 0 is the initial state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub frames: Vec<Vec<V2>>,
    /// Substeps on which some particle had `det F <= 0`.
    pub inverted_substeps: usize,
}

impl Trace {
    pub fn first(&self) -> &[V2] {
        &self.frames[0]
    }

    pub fn last(&self) -> &[V2] {
        self.frames.last().expect("trace has frames")
    }
}

/// Gradient of a scalar loss with respect to selected trace frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameGrads {
    pub frames: Vec<(usize, Vec<V2>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimGradients {
    pub positions: Vec<V2>,
    pub velocities: Vec<V2>,
    pub scale: Vec<f64>,
    pub controller: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Particle {
    x: V2,
    v: V2,
    c: M2,
    f: M2,
}

#[derive(Clone, Copy, Debug)]
struct Proj {
    n: V2,
    mu: f64,
}

#[derive(Clone, Debug, Default)]
struct NodeRule {
    fixed: bool,
    projs: Vec<Proj>,
}

struct Stencil {
    base: [usize; 2],
    fx: V2,
    w: [[f64; 3]; 2],
    dw: [[f64; 3]; 2],
}

/// Reusable simulator bound to one scene.
pub struct Simulator<'a> {
    cfg: &'a MpmConfig,
    scene: &'a Scene,
    nodes: usize,
    dx: f64,
    inv_dx: f64,
    mu: f64,
    lambda: f64,
    s_act: f64,
    rule_of: Vec<u32>,
    rules: Vec<NodeRule>,
    mass: Vec<f64>,
    mom: Vec<V2>,
    vhat: Vec<V2>,
    vel: Vec<V2>,
}

const FREE: u32 = u32::MAX;

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a MpmConfig, scene: &'a Scene) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        let n = cfg.grid_res;
        let nodes = n + 1;
        let dx = cfg.dx();
        let (mu, lambda) = cfg.lame();
        let b = cfg.boundary_cells;
        let mut rules = Vec::new();
        let mut rule_of = vec![FREE; nodes * nodes];
        let fixed = glued_nodes(scene, nodes, dx)?;
        for i in 0..nodes {
            for j in 0..nodes {
                let mut r = NodeRule {
                    fixed: fixed[i * nodes + j],
                    ..Default::default()
                };
                let p = [i as f64 * dx, j as f64 * dx];
                for rect in &scene.colliders {
                    if rect.contains(p) {
                        r.projs.push(Proj {
                            n: rect_normal(rect, p),
                            mu: cfg.friction,
                        });
                    }
                }
                if i < b {
                    r.projs.push(Proj { n: [1.0, 0.0], mu: 0.0 });
                }
                if i > n - b {
                    r.projs.push(Proj { n: [-1.0, 0.0], mu: 0.0 });
                }
                if j <= b {
                    r.projs.push(Proj {
                        n: [0.0, 1.0],
                        mu: cfg.friction,
                    });
                }
                if j > n - b {
                    r.projs.push(Proj { n: [0.0, -1.0], mu: 0.0 });
                }
                if r.fixed || !r.projs.is_empty() {
                    rule_of[i * nodes + j] = rules.len() as u32;
                    rules.push(r);
                }
            }
        }
        Ok(Self {
            cfg,
            scene,
            nodes,
            dx,
            inv_dx: 1.0 / dx,
            mu,
            lambda,
            s_act: cfg.actuation_stress(),
            rule_of,
            rules,
            mass: vec![0.0; nodes * nodes],
            mom: vec![[0.0; 2]; nodes * nodes],
            vhat: vec![[0.0; 2]; nodes * nodes],
            vel: vec![[0.0; 2]; nodes * nodes],
        })
    }

    fn initial_state(&self) -> Vec<Particle> {
        self.scene
            .positions
            .iter()
            .zip(&self.scene.velocities)
            .map(|(x, v)| Particle {
                x: *x,
                v: *v,
                c: [0.0; 4],
                f: I2,
            })
            .collect()
    }

    fn stencil(&self, x: V2, step: usize) -> Result<Stencil> {
        let mut base = [0usize; 2];
        let mut fx = [0.0; 2];
        let mut w = [[0.0; 3]; 2];
        let mut dw = [[0.0; 3]; 2];
        for d in 0..2 {
            let g = x[d] * self.inv_dx - 0.5;
            let bf = g.floor();
            if !(bf >= 0.0 && bf + 2.0 <= (self.nodes - 1) as f64) {
                return Err(Error::Numerical {
                    step,
                    what: format!("particle left the grid at {x:?}"),
                });
            }
            base[d] = bf as usize;
            let f = x[d] * self.inv_dx - bf;
            fx[d] = f;
            w[d] = [
                0.5 * (1.5 - f).powi(2),
                0.75 - (f - 1.0).powi(2),
                0.5 * (f - 0.5).powi(2),
            ];
            dw[d] = [f - 1.5, -2.0 * (f - 1.0), f - 0.5];
        }
        Ok(Stencil { base, fx, w, dw })
    }

    fn node(&self, s: &Stencil, i: usize, j: usize) -> usize {
        (s.base[0] + i) * self.nodes + s.base[1] + j
    }

    fn act_of(&self, p: usize, acts: &[f64]) -> (f64, V2) {
        match self.scene.actuator[p] {
            Some(id) if id < acts.len() => (acts[id] * self.s_act, self.scene.fibers[id]),
            _ => (0.0, [0.0; 2]),
        }
    }

    fn affine(&self, p: usize, part: &Particle, acts: &[f64]) -> (f64, f64, M2, M2) {
        let vol = self.scene.particle_volume * self.scene.scale[p];
        let m = self.cfg.density * vol;
        let (act, fib) = self.act_of(p, acts);
        let tau = stress(part.f, self.mu, self.lambda, act, fib);
        let k = -self.cfg.dt * vol * 4.0 * self.inv_dx * self.inv_dx;
        let a = std::array::from_fn(|e| k * tau[e] + m * part.c[e]);
        (m, vol, tau, a)
    }

    fn p2g(&mut self, state: &[Particle], acts: &[f64], step: usize) -> Result<()> {
        self.mass.fill(0.0);
        self.mom.fill([0.0; 2]);
        for (p, part) in state.iter().enumerate() {
            let s = self.stencil(part.x, step)?;
            let (m, _, _, a) = self.affine(p, part, acts);
            for i in 0..3 {
                for j in 0..3 {
                    let w = s.w[0][i] * s.w[1][j];
                    let d = [(i as f64 - s.fx[0]) * self.dx, (j as f64 - s.fx[1]) * self.dx];
                    let q = [
                        m * part.v[0] + a[0] * d[0] + a[1] * d[1],
                        m * part.v[1] + a[2] * d[0] + a[3] * d[1],
                    ];
                    let nd = self.node(&s, i, j);
                    self.mom[nd][0] += w * q[0];
                    self.mom[nd][1] += w * q[1];
                    self.mass[nd] += w * m;
                }
            }
        }
        Ok(())
    }

    fn grid_update(&mut self) {
        let g = self.cfg.gravity;
        let dt = self.cfg.dt;
        for nd in 0..self.mass.len() {
            let m = self.mass[nd];
            if m <= 0.0 {
                self.vhat[nd] = [0.0; 2];
                self.vel[nd] = [0.0; 2];
                continue;
            }
            let vh = [
                self.mom[nd][0] / m + dt * g[0],
                self.mom[nd][1] / m + dt * g[1],
            ];
            self.vhat[nd] = vh;
            let r = self.rule_of[nd];
            self.vel[nd] = if r == FREE {
                vh
            } else {
                apply_rule(&self.rules[r as usize], vh)
            };
        }
    }

    fn g2p(&self, state: &[Particle], next: &mut [Particle], step: usize) -> Result<bool> {
        let dt = self.cfg.dt;
        let k = 4.0 * self.inv_dx * self.inv_dx;
        let mut inverted = false;
        for (part, out) in state.iter().zip(next.iter_mut()) {
            let s = self.stencil(part.x, step)?;
            let mut v = [0.0; 2];
            let mut c = [0.0; 4];
            for i in 0..3 {
                for j in 0..3 {
                    let w = s.w[0][i] * s.w[1][j];
                    let d = [(i as f64 - s.fx[0]) * self.dx, (j as f64 - s.fx[1]) * self.dx];
                    let gv = self.vel[self.node(&s, i, j)];
                    v[0] += w * gv[0];
                    v[1] += w * gv[1];
                    c[0] += k * w * gv[0] * d[0];
                    c[1] += k * w * gv[0] * d[1];
                    c[2] += k * w * gv[1] * d[0];
                    c[3] += k * w * gv[1] * d[1];
                }
            }
            let step_m = std::array::from_fn(|e| I2[e] + dt * c[e]);
            let f = mat_mul(step_m, part.f);
            let x = [part.x[0] + dt * v[0], part.x[1] + dt * v[1]];
            if !(x.iter().chain(&v).chain(&f).all(|z| z.is_finite())) {
                return Err(Error::Numerical {
                    step,
                    what: "non-finite particle state".into(),
                });
            }
            inverted |= det(f) <= 0.0;
            *out = Particle { x, v, c, f };
        }
        Ok(inverted)
    }

    fn substep(
        &mut self,
        state: &[Particle],
        next: &mut [Particle],
        acts: &[f64],
        step: usize,
    ) -> Result<bool> {
        self.p2g(state, acts, step)?;
        self.grid_update();
        self.g2p(state, next, step)
    }

    fn run(&mut self, ctrl: &Controller, keep_all: bool) -> Result<(Trace, Vec<Particle>)> {
        ctrl.validate()?;
        let m = self.scene.len();
        let cdt = self.cfg.control_dt();
        let sub = self.cfg.substeps;
        let total = self.cfg.control_steps * sub;
        let mut states = self.initial_state();
        if keep_all {
            states.reserve(total * m);
        }
        let mut cur = states.clone();
        let mut next = cur.clone();
        let mut frames = vec![self.scene.positions.clone()];
        let mut inverted = 0;
        for cs in 0..self.cfg.control_steps {
            let acts = ctrl.eval(cs, cdt);
            for ss in 0..sub {
                let step = cs * sub + ss;
                if self.substep(&cur, &mut next, &acts, step)? {
                    inverted += 1;
                }
                std::mem::swap(&mut cur, &mut next);
                if keep_all {
                    states.extend_from_slice(&cur);
                }
            }
            frames.push(cur.iter().map(|p| p.x).collect());
        }
        if inverted > 0 {
            log::debug!("{inverted} substeps had inverted elements");
        }
        Ok((
            Trace {
                frames,
                inverted_substeps: inverted,
            },
            states,
        ))
    }

    pub fn rollout(&mut self, ctrl: &Controller) -> Result<Trace> {
        Ok(self.run(ctrl, false)?.0)
    }

    /// Runs forward, evaluates `loss` on the trace and sweeps the adjoint back.
    pub fn rollout_grad(
        &mut self,
        ctrl: &Controller,
        loss: impl FnOnce(&Trace) -> Result<(f64, FrameGrads)>,
    ) -> Result<(f64, Trace, SimGradients)> {
        let (trace, states) = self.run(ctrl, true)?;
        let (value, fg) = loss(&trace)?;
        let m = self.scene.len();
        let sub = self.cfg.substeps;
        let cdt = self.cfg.control_dt();
        let mut frame_grad: Vec<Option<&Vec<V2>>> = vec![None; self.cfg.control_steps + 1];
        for (f, g) in &fg.frames {
            if *f > self.cfg.control_steps || g.len() != m {
                return Err(invalid("frame gradient does not match the trace"));
            }
            frame_grad[*f] = Some(g);
        }
        let mut adj = vec![Particle::default(); m];
        let mut prev_adj = adj.clone();
        let mut g_scale = vec![0.0; m];
        let mut g_ctrl = vec![0.0; ctrl.params().len()];
        let k_act = ctrl.num_actuators();
        for cs in (0..self.cfg.control_steps).rev() {
            if let Some(g) = frame_grad[cs + 1] {
                for (a, gi) in adj.iter_mut().zip(g) {
                    a.x[0] += gi[0];
                    a.x[1] += gi[1];
                }
            }
            let acts = ctrl.eval(cs, cdt);
            let mut g_acts = vec![0.0; k_act];
            for ss in (0..sub).rev() {
                let step = cs * sub + ss;
                let cur = &states[step * m..(step + 1) * m];
                let next = &states[(step + 1) * m..(step + 2) * m];
                self.substep_backward(
                    cur,
                    next,
                    &acts,
                    step,
                    &adj,
                    &mut prev_adj,
                    &mut g_acts,
                    &mut g_scale,
                )?;
                std::mem::swap(&mut adj, &mut prev_adj);
            }
            ctrl.backward(cs, cdt, &g_acts, &mut g_ctrl);
        }
        if let Some(g) = frame_grad[0] {
            for (a, gi) in adj.iter_mut().zip(g) {
                a.x[0] += gi[0];
                a.x[1] += gi[1];
            }
        }
        // The initial C is zero and F the identity, so only x and v matter.
        let grads = SimGradients {
            positions: adj.iter().map(|a| a.x).collect(),
            velocities: adj.iter().map(|a| a.v).collect(),
            scale: g_scale,
            controller: g_ctrl,
        };
        Ok((value, trace, grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn substep_backward(
        &mut self,
        cur: &[Particle],
        next: &[Particle],
        acts: &[f64],
        step: usize,
        adj_next: &[Particle],
        adj_cur: &mut [Particle],
        g_acts: &mut [f64],
        g_scale: &mut [f64],
    ) -> Result<()> {
        self.p2g(cur, acts, step)?;
        self.grid_update();
        let dt = self.cfg.dt;
        let k = 4.0 * self.inv_dx * self.inv_dx;
        let nn = self.nodes * self.nodes;
        let mut gv_bar = vec![[0.0; 2]; nn];

        // Grid-to-particle.
        for ((part, nx), (an, ac)) in cur
            .iter()
            .zip(next)
            .zip(adj_next.iter().zip(adj_cur.iter_mut()))
        {
            let s = self.stencil(part.x, step)?;
            let step_m: M2 = std::array::from_fn(|e| I2[e] + dt * nx.c[e]);
            let f_bar = mat_mul(transpose(step_m), an.f);
            let ff = mat_mul(an.f, transpose(part.f));
            let c_bar: M2 = std::array::from_fn(|e| an.c[e] + dt * ff[e]);
            let vb = [an.v[0] + dt * an.x[0], an.v[1] + dt * an.x[1]];
            let mut xb = an.x;
            for i in 0..3 {
                for j in 0..3 {
                    let w = s.w[0][i] * s.w[1][j];
                    let d = [(i as f64 - s.fx[0]) * self.dx, (j as f64 - s.fx[1]) * self.dx];
                    let nd = self.node(&s, i, j);
                    let gv = self.vel[nd];
                    let cd = [
                        c_bar[0] * d[0] + c_bar[1] * d[1],
                        c_bar[2] * d[0] + c_bar[3] * d[1],
                    ];
                    gv_bar[nd][0] += w * vb[0] + k * w * cd[0];
                    gv_bar[nd][1] += w * vb[1] + k * w * cd[1];
                    let wb = vb[0] * gv[0] + vb[1] * gv[1] + k * (gv[0] * cd[0] + gv[1] * cd[1]);
                    let db = [
                        k * w * (c_bar[0] * gv[0] + c_bar[2] * gv[1]),
                        k * w * (c_bar[1] * gv[0] + c_bar[3] * gv[1]),
                    ];
                    let dwx = [s.dw[0][i] * s.w[1][j], s.w[0][i] * s.dw[1][j]];
                    xb[0] += wb * dwx[0] * self.inv_dx - db[0];
                    xb[1] += wb * dwx[1] * self.inv_dx - db[1];
                }
            }
            *ac = Particle {
                x: xb,
                v: [0.0; 2],
                c: [0.0; 4],
                f: f_bar,
            };
        }

        // Grid update.
        let g = self.cfg.gravity;
        let mut mom_bar = vec![[0.0; 2]; nn];
        let mut mass_bar = vec![0.0; nn];
        for nd in 0..nn {
            let m = self.mass[nd];
            if m <= 0.0 {
                continue;
            }
            let r = self.rule_of[nd];
            let vh_bar = if r == FREE {
                gv_bar[nd]
            } else {
                rule_backward(&self.rules[r as usize], self.vhat[nd], gv_bar[nd])
            };
            let vm = [self.vhat[nd][0] - dt * g[0], self.vhat[nd][1] - dt * g[1]];
            mom_bar[nd] = [vh_bar[0] / m, vh_bar[1] / m];
            mass_bar[nd] = -(vh_bar[0] * vm[0] + vh_bar[1] * vm[1]) / m;
        }

        // Particle-to-grid.
        let kk = -dt * 4.0 * self.inv_dx * self.inv_dx;
        for (p, (part, ac)) in cur.iter().zip(adj_cur.iter_mut()).enumerate() {
            let s = self.stencil(part.x, step)?;
            let (m, vol, tau, a) = self.affine(p, part, acts);
            let mut a_bar = [0.0; 4];
            let mut m_bar = 0.0;
            let mut vb = [0.0; 2];
            for i in 0..3 {
                for j in 0..3 {
                    let w = s.w[0][i] * s.w[1][j];
                    let d = [(i as f64 - s.fx[0]) * self.dx, (j as f64 - s.fx[1]) * self.dx];
                    let nd = self.node(&s, i, j);
                    let mb = mom_bar[nd];
                    let sb = mass_bar[nd];
                    let q = [
                        m * part.v[0] + a[0] * d[0] + a[1] * d[1],
                        m * part.v[1] + a[2] * d[0] + a[3] * d[1],
                    ];
                    let wb = mb[0] * q[0] + mb[1] * q[1] + sb * m;
                    vb[0] += w * m * mb[0];
                    vb[1] += w * m * mb[1];
                    a_bar[0] += w * mb[0] * d[0];
                    a_bar[1] += w * mb[0] * d[1];
                    a_bar[2] += w * mb[1] * d[0];
                    a_bar[3] += w * mb[1] * d[1];
                    let db = [
                        w * (a[0] * mb[0] + a[2] * mb[1]),
                        w * (a[1] * mb[0] + a[3] * mb[1]),
                    ];
                    m_bar += w * (mb[0] * part.v[0] + mb[1] * part.v[1] + sb);
                    let dwx = [s.dw[0][i] * s.w[1][j], s.w[0][i] * s.dw[1][j]];
                    ac.x[0] += wb * dwx[0] * self.inv_dx - db[0];
                    ac.x[1] += wb * dwx[1] * self.inv_dx - db[1];
                }
            }
            let tau_bar: M2 = std::array::from_fn(|e| kk * vol * a_bar[e]);
            let c_bar: M2 = std::array::from_fn(|e| m * a_bar[e]);
            m_bar += dot4(a_bar, part.c);
            let vol_bar = kk * dot4(a_bar, tau);
            let (act, fib) = self.act_of(p, acts);
            let (f_bar, act_bar) = stress_backward(part.f, self.mu, self.lambda, act, fib, tau_bar);
            for (a, b) in ac.f.iter_mut().zip(f_bar) {
                *a += b;
            }
            ac.c = c_bar;
            ac.v = vb;
            if let Some(id) = self.scene.actuator[p] {
                if id < g_acts.len() {
                    g_acts[id] += act_bar * self.s_act;
                }
            }
            g_scale[p] += self.scene.particle_volume * (self.cfg.density * m_bar + vol_bar);
        }
        Ok(())
    }
}

fn glued_nodes(scene: &Scene, nodes: usize, dx: f64) -> Result<Vec<bool>> {
    let mut fixed = vec![false; nodes * nodes];
    for (x, r) in scene.positions.iter().zip(&scene.role) {
        if *r != Role::Base {
            continue;
        }
        let b0 = (x[0] / dx - 0.5).floor();
        let b1 = (x[1] / dx - 0.5).floor();
        if b0 < 0.0 || b1 < 0.0 || b0 + 2.0 > (nodes - 1) as f64 || b1 + 2.0 > (nodes - 1) as f64 {
            return Err(invalid("glued particle outside the grid"));
        }
        for i in 0..3 {
            for j in 0..3 {
                fixed[(b0 as usize + i) * nodes + b1 as usize + j] = true;
            }
        }
    }
    Ok(fixed)
}

/// Outward normal of the face of `rect` nearest to the interior point `p`.
fn rect_normal(rect: &Rect, p: V2) -> V2 {
    let cands = [
        (p[1] - rect.min[1], [0.0, -1.0]),
        (rect.max[0] - p[0], [1.0, 0.0]),
        (p[0] - rect.min[0], [-1.0, 0.0]),
        (rect.max[1] - p[1], [0.0, 1.0]),
    ];
    // Ties resolve toward the later entry, favouring the top face.
    let mut best = cands[0];
    for c in &cands[1..] {
        if c.0 <= best.0 {
            best = *c;
        }
    }
    best.1
}

fn project(pr: &Proj, v: V2) -> V2 {
    let vn = v[0] * pr.n[0] + v[1] * pr.n[1];
    if vn >= 0.0 {
        return v;
    }
    let vt = [v[0] - vn * pr.n[0], v[1] - vn * pr.n[1]];
    let t = (vt[0] * vt[0] + vt[1] * vt[1]).sqrt();
    if t <= -pr.mu * vn {
        return [0.0; 2];
    }
    let s = 1.0 + pr.mu * vn / t;
    [vt[0] * s, vt[1] * s]
}

fn project_backward(pr: &Proj, v: V2, g: V2) -> V2 {
    let n = pr.n;
    let vn = v[0] * n[0] + v[1] * n[1];
    if vn >= 0.0 {
        return g;
    }
    let vt = [v[0] - vn * n[0], v[1] - vn * n[1]];
    let t = (vt[0] * vt[0] + vt[1] * vt[1]).sqrt();
    if t <= -pr.mu * vn {
        return [0.0; 2];
    }
    let s = 1.0 + pr.mu * vn / t;
    let q = g[0] * vt[0] + g[1] * vt[1];
    let vn_bar = q * pr.mu / t;
    let t_bar = -q * pr.mu * vn / (t * t);
    let vt_bar = [s * g[0] + t_bar * vt[0] / t, s * g[1] + t_bar * vt[1] / t];
    let nvt = n[0] * vt_bar[0] + n[1] * vt_bar[1];
    [
        vt_bar[0] - n[0] * nvt + n[0] * vn_bar,
        vt_bar[1] - n[1] * nvt + n[1] * vn_bar,
    ]
}

fn apply_rule(r: &NodeRule, v: V2) -> V2 {
    if r.fixed {
        return [0.0; 2];
    }
    r.projs.iter().fold(v, |v, p| project(p, v))
}

fn rule_backward(r: &NodeRule, v: V2, g: V2) -> V2 {
    if r.fixed {
        return [0.0; 2];
    }
    let mut inputs = Vec::with_capacity(r.projs.len());
    let mut cur = v;
    for p in &r.projs {
        inputs.push(cur);
        cur = project(p, cur);
    }
    let mut g = g;
    for (p, vin) in r.projs.iter().zip(inputs).rev() {
        g = project_backward(p, vin, g);
    }
    g
}

fn mat_mul(a: M2, b: M2) -> M2 {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn transpose(a: M2) -> M2 {
    [a[0], a[2], a[1], a[3]]
}

fn det(a: M2) -> f64 {
    a[0] * a[3] - a[1] * a[2]
}

fn dot4(a: M2, b: M2) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

fn rotation_angle(f: M2) -> f64 {
    (f[2] - f[1]).atan2(f[0] + f[3])
}

/// Kirchhoff stress: fixed-corotated elasticity plus fiber tension
/// `act * (F f)(F f)^T`.
fn stress(f: M2, mu: f64, lambda: f64, act: f64, fib: V2) -> M2 {
    let (s, c) = rotation_angle(f).sin_cos();
    let r = [c, -s, s, c];
    let fr: M2 = std::array::from_fn(|e| f[e] - r[e]);
    let t1 = mat_mul(fr, transpose(f));
    let j = det(f);
    let iso = lambda * (j - 1.0) * j;
    let u = [f[0] * fib[0] + f[1] * fib[1], f[2] * fib[0] + f[3] * fib[1]];
    [
        2.0 * mu * t1[0] + iso + act * u[0] * u[0],
        2.0 * mu * t1[1] + act * u[0] * u[1],
        2.0 * mu * t1[2] + act * u[1] * u[0],
        2.0 * mu * t1[3] + iso + act * u[1] * u[1],
    ]
}

/// Returns `(dPhi/dF, dPhi/dact)` for `Phi = <tau_bar, stress(F, act)>`.
fn stress_backward(f: M2, mu: f64, lambda: f64, act: f64, fib: V2, tb: M2) -> (M2, f64) {
    let y = f[2] - f[1];
    let x = f[0] + f[3];
    let (s, c) = y.atan2(x).sin_cos();
    let r = [c, -s, s, c];
    let fr: M2 = std::array::from_fn(|e| f[e] - r[e]);
    let tbf = mat_mul(tb, f);
    let tbt_fr = mat_mul(transpose(tb), fr);
    let mut fb: M2 = std::array::from_fn(|e| 2.0 * mu * (tbf[e] + tbt_fr[e]));
    let r_bar: M2 = std::array::from_fn(|e| -2.0 * mu * tbf[e]);
    let dr = [-s, -c, c, -s];
    let th_bar = dot4(r_bar, dr);
    let r2 = x * x + y * y;
    if r2 > 0.0 {
        let gy = th_bar * x / r2;
        let gx = -th_bar * y / r2;
        fb[0] += gx;
        fb[3] += gx;
        fb[2] += gy;
        fb[1] -= gy;
    }
    let j = det(f);
    let j_bar = lambda * (2.0 * j - 1.0) * (tb[0] + tb[3]);
    fb[0] += j_bar * f[3];
    fb[1] -= j_bar * f[2];
    fb[2] -= j_bar * f[1];
    fb[3] += j_bar * f[0];
    let u = [f[0] * fib[0] + f[1] * fib[1], f[2] * fib[0] + f[3] * fib[1]];
    let tu = [tb[0] * u[0] + tb[1] * u[1], tb[2] * u[0] + tb[3] * u[1]];
    let act_bar = u[0] * tu[0] + u[1] * tu[1];
    let ttu = [tb[0] * u[0] + tb[2] * u[1], tb[1] * u[0] + tb[3] * u[1]];
    let ub = [act * (tu[0] + ttu[0]), act * (tu[1] + ttu[1])];
    fb[0] += ub[0] * fib[0];
    fb[1] += ub[0] * fib[1];
    fb[2] += ub[1] * fib[0];
    fb[3] += ub[1] * fib[1];
    (fb, act_bar)
}

pub fn rollout(scene: &Scene, ctrl: &Controller, cfg: &MpmConfig) -> Result<Trace> {
    Simulator::new(cfg, scene)?.rollout(ctrl)
}

pub fn rollout_grad(
    scene: &Scene,
    ctrl: &Controller,
    cfg: &MpmConfig,
    loss: impl FnOnce(&Trace) -> Result<(f64, FrameGrads)>,
) -> Result<(f64, Trace, SimGradients)> {
    Simulator::new(cfg, scene)?.rollout_grad(ctrl, loss)
}

/// Total grid momentum right after particle-to-grid, alongside the total
/// particle momentum it should equal.
pub fn p2g_momentum(scene: &Scene, cfg: &MpmConfig, acts: &[f64]) -> Result<(V2, V2)> {
    let mut sim = Simulator::new(cfg, scene)?;
    let state = sim.initial_state();
    sim.p2g(&state, acts, 0)?;
    let grid = sim.mom.iter().fold([0.0; 2], |s, m| [s[0] + m[0], s[1] + m[1]]);
    let mut parts = [0.0; 2];
    for (p, part) in state.iter().enumerate() {
        let m = cfg.density * scene.particle_volume * scene.scale[p];
        parts[0] += m * part.v[0];
        parts[1] += m * part.v[1];
    }
    Ok((grid, parts))
}

/// One SVG frame: particles colored by actuator (objects grey, base black),
/// colliders and ground as outlines.
pub fn frame_svg(scene: &Scene, frame: &[V2], cfg: &MpmConfig, view: Rect) -> String {
    const PALETTE: [&str; 8] = [
        "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    ];
    let size = 400.0;
    let sx = size / (view.max[0] - view.min[0]);
    let sy = size / (view.max[1] - view.min[1]);
    let px = |p: V2| ((p[0] - view.min[0]) * sx, size - (p[1] - view.min[1]) * sy);
    let r = (scene.particle_volume.sqrt() * 0.5 * sx).max(0.8);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let (_, gy) = px([0.0, cfg.ground_y()]);
    s += &format!("<line x1=\"0\" y1=\"{gy:.2}\" x2=\"{size}\" y2=\"{gy:.2}\" stroke=\"black\"/>\n");
    for c in &scene.colliders {
        let (x0, y1) = px(c.min);
        let (x1, y0) = px(c.max);
        s += &format!(
            "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"black\"/>\n",
            x1 - x0,
            y1 - y0
        );
    }
    for (i, p) in frame.iter().enumerate() {
        let color = match (scene.role[i], scene.actuator[i]) {
            (Role::Object, _) => "#7f7f7f",
            (Role::Base, _) => "#000000",
            (_, Some(a)) => PALETTE[a % PALETTE.len()],
            (_, None) => "#bcbd22",
        };
        let (x, y) = px(*p);
        s += &format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"{color}\"/>\n");
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat_fd(f: impl Fn(M2) -> f64, x: M2) -> M2 {
        let h = 1e-6;
        std::array::from_fn(|e| {
            let mut a = x;
            let mut b = x;
            a[e] += h;
            b[e] -= h;
            (f(a) - f(b)) / (2.0 * h)
        })
    }

    #[test]
    fn stress_backward_matches_fd() {
        let f = [1.1, 0.2, -0.15, 0.9];
        let tb = [0.3, -0.7, 0.2, 0.5];
        let fib = [0.6, 0.8];
        let (mu, la, act) = (3.0, 2.0, 1.7);
        let (g, ga) = stress_backward(f, mu, la, act, fib, tb);
        let fd = mat_fd(|m| dot4(tb, stress(m, mu, la, act, fib)), f);
        for e in 0..4 {
            assert!((g[e] - fd[e]).abs() < 1e-7, "{e}: {} vs {}", g[e], fd[e]);
        }
        let h = 1e-6;
        let fa = (dot4(tb, stress(f, mu, la, act + h, fib)) - dot4(tb, stress(f, mu, la, act - h, fib)))
            / (2.0 * h);
        assert!((ga - fa).abs() < 1e-7);
    }

    #[test]
    fn rest_state_has_zero_elastic_stress() {
        assert_eq!(stress(I2, 5.0, 3.0, 0.0, [0.0, 1.0]), [0.0; 4]);
        let r = {
            let (s, c) = 0.4f64.sin_cos();
            [c, -s, s, c]
        };
        let t = stress(r, 5.0, 3.0, 0.0, [0.0, 1.0]);
        assert!(t.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn projection_backward_matches_fd() {
        let pr = Proj {
            n: [0.6, 0.8],
            mu: 0.4,
        };
        for v in [[1.0, -1.0], [-0.3, -0.2], [0.5, 0.5], [2.0, -0.5]] {
            let g = [0.7, -0.4];
            let b = project_backward(&pr, v, g);
            let h = 1e-7;
            for d in 0..2 {
                let mut a = v;
                let mut c = v;
                a[d] += h;
                c[d] -= h;
                let pa = project(&pr, a);
                let pc = project(&pr, c);
                let fd = ((pa[0] - pc[0]) * g[0] + (pa[1] - pc[1]) * g[1]) / (2.0 * h);
                assert!((fd - b[d]).abs() < 1e-6, "v={v:?} d={d}");
            }
        }
    }

    #[test]
    fn sticking_contact_stops_the_node() {
        let pr = Proj {
            n: [0.0, 1.0],
            mu: 0.4,
        };
        assert_eq!(project(&pr, [0.1, -1.0]), [0.0, 0.0]);
        let slid = project(&pr, [1.0, -1.0]);
        assert!((slid[0] - 0.6).abs() < 1e-15 && slid[1] == 0.0);
        assert_eq!(project(&pr, [1.0, 1.0]), [1.0, 1.0]);
    }

    #[test]
    fn controller_examples() {
        let dt = MpmConfig::default().control_dt();
        let c = Controller::Sine {
            amp: vec![0.0],
            freq: vec![30.0],
            phase: vec![1.0],
            bias: vec![0.25],
        };
        for s in [0, 7, 99] {
            assert_eq!(c.eval(s, dt), vec![0.25]);
        }
        let pi = std::f64::consts::PI;
        let crawl = Controller::Sine {
            amp: vec![0.3; 4],
            freq: vec![30.0; 4],
            phase: vec![0.5 * pi, 1.5 * pi, 0.0, pi],
            bias: vec![0.0; 4],
        };
        let a = crawl.eval(0, dt);
        let want = [0.3, -0.3, 0.0, 0.0];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        let big = Controller::Sine {
            amp: vec![5.0],
            freq: vec![3.0],
            phase: vec![0.2],
            bias: vec![0.0],
        };
        assert!((0..100).all(|s| big.eval(s, dt)[0].abs() <= 1.0));
    }

    #[test]
    fn controller_backward_matches_fd() {
        let dt = MpmConfig::default().control_dt();
        let c = Controller::Sine {
            amp: vec![0.3, 0.6],
            freq: vec![30.0, 12.0],
            phase: vec![0.4, 2.0],
            bias: vec![0.1, -0.2],
        };
        let ga = [0.7, -1.3];
        let mut g = vec![0.0; 8];
        c.backward(13, dt, &ga, &mut g);
        let p = c.params();
        for i in 0..8 {
            let h = 1e-6;
            let mut a = c.clone();
            let mut b = c.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[i] += h;
            pb[i] -= h;
            a.set_params(&pa).unwrap();
            b.set_params(&pb).unwrap();
            let ea = a.eval(13, dt);
            let eb = b.eval(13, dt);
            let fd = ((ea[0] - eb[0]) * ga[0] + (ea[1] - eb[1]) * ga[1]) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let cfg = MpmConfig {
            dt: 1e-2,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        MpmConfig::default().validate().unwrap();
    }
}
