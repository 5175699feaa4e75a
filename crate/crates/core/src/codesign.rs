//! Physics-augmented generation: online embedding optimization, diffusion as
//! co-design (MCMC steps interleaved with reverse diffusion), embedding
//! composition, and the voxel/particle co-optimization baselines.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, adam_step, AdamState, DenoiserParams, Embedding};
use crate::diffusion::{self, guided_eps, predict_x0, q_sample, Guidance, NoiseSchedule, SampleHook};
use crate::error::{invalid, Error, Result};
use crate::mpmsim::{Controller, MpmConfig};
use crate::rng::{self, Rng};
use crate::robotize::{chain_grad_to_xt, place_actuators, robotize_x0, RobotizeConfig};
use crate::shapes::PointSet;
use crate::tasks::{self, performance_or_sentinel, TaskName, TaskSpec, SENTINEL};

const SAMPLE_STREAM: u64 = 0x5A_3D1E;
const MCMC_STREAM: u64 = 0x3C3C;

// ---------------------------------------------------------------------------
// Evaluation

/// Fixed pieces shared by every evaluation and co-design step.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub params: &'a DenoiserParams,
    pub sched: &'a NoiseSchedule,
    pub task: &'a TaskSpec,
    pub mpm: &'a MpmConfig,
    pub robotize: &'a RobotizeConfig,
}

/// Task performance of a clean sample under a given controller; failures
/// map to [`SENTINEL`].
pub fn evaluate_with(x0: &PointSet, ctrl: &Controller, env: &Env) -> f64 {
    performance_or_sentinel((|| {
        let design = robotize_x0(x0, env.task.workspace, env.task.actuators.as_ref(), env.robotize)?;
        Ok(tasks::simulate(env.task, &design, ctrl, env.mpm)?.0)
    })())
}

/// Task performance of a clean sample under the task's prescribed controller.
pub fn evaluate(x0: &PointSet, env: &Env) -> f64 {
    evaluate_with(x0, &env.task.controller, env)
}

/// Random stream for reverse diffusion of sample `seed`; shared by plain and
/// co-design sampling so the two can be compared trajectory by trajectory.
pub fn sample_rng(seed: u64) -> Rng {
    rng::stream(seed, SAMPLE_STREAM)
}

/// Plain guided sample for `seed`.
pub fn sample_plain(env: &Env, guidance: &Guidance, n_points: usize, seed: u64) -> Result<PointSet> {
    diffusion::sample(
        env.params,
        guidance,
        env.sched,
        n_points,
        &mut sample_rng(seed),
        &mut diffusion::NoHook,
    )
}

// ---------------------------------------------------------------------------
// Buffer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub x0: PointSet,
    pub performance: f64,
    pub epoch_created: usize,
}

fn is_valid(e: &BufferEntry) -> bool {
    e.performance.is_finite() && e.performance > SENTINEL
}

/// Indices of the `k` best valid entries, best first (ties favour newer).
fn top_indices(entries: &[BufferEntry], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| is_valid(&entries[i])).collect();
    idx.sort_by(|&a, &b| entries[b].performance.total_cmp(&entries[a].performance).then(b.cmp(&a)));
    idx.truncate(k);
    idx
}

/// Union of the buffer and new entries, keeping the `top_k` best plus the
/// newest entries up to `capacity`. Order is oldest first.
pub fn filter_buffer(buffer: &[BufferEntry], new_entries: &[BufferEntry], capacity: usize, top_k: usize) -> Vec<BufferEntry> {
    let all: Vec<BufferEntry> = buffer.iter().chain(new_entries).cloned().collect();
    if all.len() <= capacity {
        return all;
    }
    let mut keep = vec![false; all.len()];
    let mut kept = 0;
    for i in top_indices(&all, top_k.min(capacity)) {
        keep[i] = true;
        kept += 1;
    }
    for i in (0..all.len()).rev() {
        if kept >= capacity {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            kept += 1;
        }
    }
    all.into_iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e).collect()
}

// ---------------------------------------------------------------------------
// Embedding optimization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptimConfig {
    pub buffer_capacity: usize,
    pub min_buffer: usize,
    pub samples_per_epoch: usize,
    pub train_iters_per_epoch: usize,
    pub top_k: usize,
    pub batch_size: usize,
    pub embed_lr: f64,
    pub max_epochs: usize,
    pub guidance_scale: f64,
    pub n_points: usize,
}

impl Default for EmbedOptimConfig {
    fn default() -> Self {
        Self::for_task(TaskName::Crawling)
    }
}

impl EmbedOptimConfig {
    pub fn for_task(task: TaskName) -> Self {
        let big = matches!(task, TaskName::Balancing | TaskName::Landing | TaskName::Hurdling);
        Self {
            buffer_capacity: if big { 600 } else { 60 },
            min_buffer: 60,
            samples_per_epoch: 60,
            train_iters_per_epoch: 1,
            top_k: if task.is_passive() { 12 } else { 6 },
            batch_size: 6,
            embed_lr: 1e-2,
            max_epochs: 10,
            guidance_scale: 2.0,
            n_points: crate::shapes::DEFAULT_POINTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.buffer_capacity {
            return Err(Error::Config("top_k must be in [1, buffer_capacity]".into()));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 || self.n_points == 0 {
            return Err(Error::Config("batch_size, samples_per_epoch and n_points must be positive".into()));
        }
        if !(self.embed_lr >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config("embed_lr and guidance_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Resumable state of the embedding optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedState {
    pub embedding: Embedding,
    pub adam: AdamState,
    pub buffer: Vec<BufferEntry>,
    pub epoch: usize,
}

impl EmbedState {
    /// Starts from the all-zero (null-equivalent) conditioning vector.
    pub fn new(dim: usize) -> Self {
        Self {
            embedding: Embedding::new(vec![0.0; dim]),
            adam: AdamState::new(dim),
            buffer: Vec::new(),
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_performance: f64,
    pub max_performance: f64,
    pub sample_mean: f64,
    pub embedding_norm: f64,
    pub loss: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,buffer_mean,buffer_max,sample_mean,embedding_norm,loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.mean_performance,
            self.max_performance,
            self.sample_mean,
            self.embedding_norm,
            self.loss.map_or(String::new(), |l| l.to_string())
        )
    }
}

/// One draw of the embedding objective: a clean sample, a step and a noise.
pub struct EmbedDraw {
    pub x0: PointSet,
    pub t: usize,
    pub eps: PointSet,
}

/// Mean denoising loss of the draws under condition `c`, with its gradient
/// with respect to `c` (the denoiser parameters stay frozen).
pub fn embedding_loss(p: &DenoiserParams, c: &Embedding, draws: &[EmbedDraw], sched: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
    if draws.is_empty() {
        return Err(invalid("empty embedding batch"));
    }
    let scale = 1.0 / draws.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = draws
        .par_iter()
        .map(|d| {
            let x_t = q_sample(&d.x0, d.t, &d.eps, sched)?;
            denoiser::denoising_loss(p, &x_t, d.t, c, &d.eps, scale, None)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; c.dim()];
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// One epoch: sample, evaluate, filter the buffer, then train `c`. Every
/// epoch draws from its own stream under `seed`, so runs can be resumed.
pub fn embed_optim_epoch(state: &mut EmbedState, env: &Env, cfg: &EmbedOptimConfig, seed: u64) -> Result<EpochLog> {
    cfg.validate()?;
    let root = rng::split(seed, state.epoch as u64);
    let guidance = Guidance::cfg(state.embedding.clone(), cfg.guidance_scale);
    let fresh: Vec<Result<BufferEntry>> = (0..cfg.samples_per_epoch)
        .into_par_iter()
        .map(|i| {
            let x0 = sample_plain(env, &guidance, cfg.n_points, rng::split(root, i as u64))?;
            let performance = evaluate(&x0, env);
            Ok(BufferEntry {
                x0,
                performance,
                epoch_created: state.epoch,
            })
        })
        .collect();
    let fresh: Vec<BufferEntry> = fresh.into_iter().collect::<Result<_>>()?;
    let sample_mean = fresh.iter().map(|e| e.performance.max(0.0)).sum::<f64>() / fresh.len() as f64;
    state.buffer = filter_buffer(&state.buffer, &fresh, cfg.buffer_capacity, cfg.top_k);

    let mut loss = None;
    if state.buffer.len() >= cfg.min_buffer && cfg.train_iters_per_epoch > 0 {
        let top = top_indices(&state.buffer, cfg.top_k);
        if top.is_empty() {
            log::warn!("epoch {}: no valid buffer entries, skipping embedding update", state.epoch);
        } else {
            let mut r = rng::stream(root, u64::MAX);
            for _ in 0..cfg.train_iters_per_epoch {
                let draws: Vec<EmbedDraw> = (0..cfg.batch_size)
                    .map(|_| {
                        let e = &state.buffer[top[r.random_range(0..top.len())]];
                        EmbedDraw {
                            x0: e.x0.clone(),
                            t: r.random_range(1..=env.sched.steps()),
                            eps: PointSet::gaussian(e.x0.len(), &mut r),
                        }
                    })
                    .collect();
                let (l, g) = embedding_loss(env.params, &state.embedding, &draws, env.sched)?;
                adam_step(&mut state.embedding.vec, &g, &mut state.adam, cfg.embed_lr)?;
                state.embedding.is_null = false;
                loss = Some(l);
            }
        }
    }
    let valid: Vec<f64> = state.buffer.iter().filter(|e| is_valid(e)).map(|e| e.performance).collect();
    let log = EpochLog {
        epoch: state.epoch,
        mean_performance: if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 },
        max_performance: if valid.is_empty() { 0.0 } else { valid.iter().copied().fold(f64::NEG_INFINITY, f64::max) },
        sample_mean,
        embedding_norm: state.embedding.norm(),
        loss,
    };
    state.epoch += 1;
    Ok(log)
}

// ---------------------------------------------------------------------------
// Diffusion as co-design

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerPolicy {
    /// Carry the controller over from the previous window.
    Inherit,
    /// Restart every window from the prescribed controller.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodesignConfig {
    pub t_max: usize,
    pub t_min: usize,
    pub delta_t: usize,
    pub k: usize,
    /// `sigma_t = sigma_scale * beta_t`.
    pub sigma_scale: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Caps `kappa |g_x|` at `renorm_scale |eps_hat|`.
    pub renorm_scale: f64,
    pub controller_policy: ControllerPolicy,
    /// Use `sigma^2` rather than `sigma` as the injected noise scale.
    pub literal_noise: bool,
}

impl Default for CodesignConfig {
    fn default() -> Self {
        Self::for_task(TaskName::Crawling)
    }
}

impl CodesignConfig {
    pub fn for_task(task: TaskName) -> Self {
        let landing = task == TaskName::Landing;
        Self {
            t_max: if landing { 150 } else { 400 },
            t_min: 0,
            delta_t: if landing { 25 } else { 50 },
            k: if task.is_passive() { 3 } else { 5 },
            sigma_scale: 1e-4,
            kappa: 1e4,
            gamma: if task == TaskName::Crawling { 0.01 } else { 0.001 },
            renorm_scale: 10.0,
            controller_policy: ControllerPolicy::Inherit,
            literal_noise: false,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be positive".into()));
        }
        if self.t_max > steps || self.t_min > self.t_max {
            return Err(Error::Config(format!("need t_min <= t_max <= {steps}")));
        }
        if !(self.sigma_scale >= 0.0 && self.kappa >= 0.0 && self.gamma >= 0.0 && self.renorm_scale >= 0.0) {
            return Err(Error::Config("sigma_scale, kappa, gamma, renorm_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether diffusion time `t` opens a co-design window. MCMC steps are
    /// defined for `t >= 1` only, so `t_max = 0` disables co-design.
    pub fn is_window(&self, t: usize) -> bool {
        self.k > 0 && t >= 1 && t >= self.t_min && t <= self.t_max && (self.t_max - t).is_multiple_of(self.delta_t)
    }
}

/// Gradient of the task loss with respect to `x_t` and the controller.
pub struct DesignGradient {
    pub loss: f64,
    pub performance: f64,
    pub x: PointSet,
    pub controller: Vec<f64>,
}

/// `x_t -> x0_hat -> design -> rollout`, differentiated back to `x_t`
/// (holding `eps_hat` fixed) and to the controller parameters.
pub fn design_gradient(x_t: &PointSet, t: usize, eps_hat: &PointSet, ctrl: &Controller, env: &Env) -> Result<DesignGradient> {
    let x_hat0 = if t == 0 { x_t.clone() } else { predict_x0(x_t, t, eps_hat, env.sched)? };
    let design = robotize_x0(&x_hat0, env.task.workspace, env.task.actuators.as_ref(), env.robotize)?;
    let g = tasks::rollout_task_grad(env.task, &design, ctrl, env.mpm)?;
    if !g.loss.is_finite() || g.design.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: t,
            what: "non-finite design gradient".into(),
        });
    }
    let g0 = design.grad_to_sample(&x_hat0, &g.design, env.robotize.alpha)?;
    Ok(DesignGradient {
        loss: g.loss,
        performance: g.performance,
        x: chain_grad_to_xt(&g0, t, env.sched)?,
        controller: g.controller,
    })
}

fn norm(p: &PointSet) -> f64 {
    p.points.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Outcome of one MCMC step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub k: usize,
    pub loss: Option<f64>,
    pub performance: Option<f64>,
    pub grad_norm: f64,
    pub eps_norm: f64,
}

/// One inner step at diffusion time `t`: updates `x_t` and `ctrl` in place.
pub fn mcmc_codesign_step(
    x_t: &mut PointSet,
    t: usize,
    ctrl: &mut Controller,
    guidance: &Guidance,
    ccfg: &CodesignConfig,
    env: &Env,
    noise_rng: &mut Rng,
) -> Result<StepLog> {
    if t == 0 || t > env.sched.steps() {
        return Err(invalid(format!("co-design step needs 1 <= t <= {}", env.sched.steps())));
    }
    let eps_hat = guided_eps(env.params, x_t, t, guidance)?;
    let eps_norm = norm(&eps_hat);
    let mut log = StepLog {
        t,
        k: 0,
        loss: None,
        performance: None,
        grad_norm: 0.0,
        eps_norm,
    };
    let mut g_x = PointSet::zeros(x_t.len());
    if ccfg.kappa != 0.0 || ccfg.gamma != 0.0 {
        match design_gradient(x_t, t, &eps_hat, ctrl, env) {
            Ok(g) => {
                log.loss = Some(g.loss);
                log.performance = Some(g.performance);
                g_x = g.x;
                let gn = norm(&g_x);
                log.grad_norm = gn;
                let cap = ccfg.renorm_scale * eps_norm;
                if ccfg.kappa * gn > cap && gn > 0.0 {
                    g_x.points *= cap / (ccfg.kappa * gn);
                }
                if ccfg.gamma != 0.0 {
                    let mut p = ctrl.params();
                    for (v, d) in p.iter_mut().zip(&g.controller) {
                        *v -= ccfg.gamma * d;
                    }
                    ctrl.set_params(&p)?;
                }
            }
            Err(e) => log::debug!("t={t}: design gradient skipped: {e}"),
        }
    }
    let sigma = ccfg.sigma_scale * env.sched.beta(t);
    let step = sigma * sigma / 2.0;
    let noise_scale = if ccfg.literal_noise { sigma * sigma } else { sigma };
    let noise = PointSet::gaussian(x_t.len(), noise_rng);
    x_t.points.zip_mut_with(&eps_hat.points, |x, e| *x += step * e);
    x_t.points.zip_mut_with(&g_x.points, |x, g| *x -= step * ccfg.kappa * g);
    x_t.points.zip_mut_with(&noise.points, |x, n| *x += noise_scale * n);
    Ok(log)
}

struct CodesignHook<'a> {
    env: &'a Env<'a>,
    guidance: &'a Guidance,
    ccfg: &'a CodesignConfig,
    ctrl: Controller,
    init: Controller,
    rng: Rng,
    log: Vec<StepLog>,
}

impl SampleHook for CodesignHook<'_> {
    fn after_step(&mut self, t: usize, x: &mut PointSet) -> Result<()> {
        if !self.ccfg.is_window(t) {
            return Ok(());
        }
        if self.ccfg.controller_policy == ControllerPolicy::Reset {
            self.ctrl = self.init.clone();
        }
        for k in 0..self.ccfg.k {
            let mut l = mcmc_codesign_step(x, t, &mut self.ctrl, self.guidance, self.ccfg, self.env, &mut self.rng)?;
            l.k = k;
            self.log.push(l);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodesignResult {
    pub x0: PointSet,
    pub controller: Controller,
    pub performance: f64,
    pub steps: Vec<StepLog>,
}

/// Full reverse diffusion with co-design windows; the controller starts from
/// the task's prescribed one.
pub fn sample_codesign(env: &Env, guidance: &Guidance, ccfg: &CodesignConfig, n_points: usize, seed: u64) -> Result<CodesignResult> {
    ccfg.validate(env.sched.steps())?;
    let mut hook = CodesignHook {
        env,
        guidance,
        ccfg,
        ctrl: env.task.controller.clone(),
        init: env.task.controller.clone(),
        rng: rng::stream(seed, MCMC_STREAM),
        log: Vec::new(),
    };
    let x0 = diffusion::sample(env.params, guidance, env.sched, n_points, &mut sample_rng(seed), &mut hook)?;
    let performance = evaluate_with(&x0, &hook.ctrl, env);
    Ok(CodesignResult {
        x0,
        controller: hook.ctrl,
        performance,
        steps: hook.log,
    })
}

/// Composed guidance `eps_null + sum_i w_i (eps_{c_i} - eps_null)`.
pub fn compose_embeddings(parts: &[(Embedding, f64)], p: &DenoiserParams, x_t: &PointSet, t: usize) -> Result<PointSet> {
    diffusion::compose_eps(p, x_t, t, parts)
}

// ---------------------------------------------------------------------------
// Baselines

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One occupancy logit per voxel of `voxel_size x voxel_size` particles.
    Voxel,
    /// One occupancy logit per lattice particle.
    Particle,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(BaselineKind::Voxel),
            "particle" => Ok(BaselineKind::Particle),
            _ => Err(invalid(format!("unknown baseline {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub iters: usize,
    pub restarts: usize,
    pub design_lr: f64,
    /// Controller step; `None` uses the task's co-design gamma.
    pub gamma: Option<f64>,
    /// Lattice particles along the shorter workspace side.
    pub resolution: usize,
    pub voxel_size: usize,
    pub init_std: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            iters: 45,
            restarts: 20,
            design_lr: 0.01,
            gamma: None,
            resolution: 16,
            voxel_size: 2,
            init_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartLog {
    pub restart: usize,
    pub initial: f64,
    pub best: f64,
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub kind: BaselineKind,
    pub best: f64,
    pub best_restart: usize,
    pub best_initial: f64,
    pub restarts: Vec<RestartLog>,
}

/// Fixed lattice over the workspace with its logit grouping.
struct Lattice {
    points: Vec<[f64; 2]>,
    group: Vec<usize>,
    groups: usize,
    volume: f64,
}

fn lattice(task: &TaskSpec, kind: BaselineKind, cfg: &BaselineConfig) -> Result<Lattice> {
    if cfg.resolution < 2 || cfg.voxel_size == 0 {
        return Err(Error::Config("baseline resolution must be >= 2 and voxel_size >= 1".into()));
    }
    let [w, h] = task.workspace;
    let s = w.min(h) / cfg.resolution as f64;
    let nx = (w / s).round() as usize;
    let ny = (h / s).round() as usize;
    let (sx, sy) = (w / nx as f64, h / ny as f64);
    let vs = if kind == BaselineKind::Voxel { cfg.voxel_size } else { 1 };
    let gx = nx.div_ceil(vs);
    let mut points = Vec::with_capacity(nx * ny);
    let mut group = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            points.push([(i as f64 + 0.5) * sx, (j as f64 + 0.5) * sy]);
            group.push((j / vs) * gx + i / vs);
        }
    }
    Ok(Lattice {
        points,
        group,
        groups: gx * ny.div_ceil(vs),
        volume: sx * sy,
    })
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gradient co-optimization of occupancy logits and the controller from
/// `cfg.restarts` random initializations; reports the best restart.
pub fn run_baseline(kind: BaselineKind, task: &TaskSpec, mpm: &MpmConfig, cfg: &BaselineConfig, seed: u64) -> Result<BaselineResult> {
    if cfg.restarts == 0 {
        return Err(Error::Config("baseline needs at least one restart".into()));
    }
    let lat = lattice(task, kind, cfg)?;
    let (actuator, fibers) = match &task.actuators {
        Some(l) if l.count > 0 => {
            let ids = place_actuators(&lat.points, l.count, &l.axes, 0)?;
            let n = (l.fiber[0].powi(2) + l.fiber[1].powi(2)).sqrt();
            (ids.into_iter().map(Some).collect(), vec![[l.fiber[0] / n, l.fiber[1] / n]; l.count])
        }
        _ => (vec![None; lat.points.len()], Vec::new()),
    };
    let gamma = cfg.gamma.unwrap_or_else(|| CodesignConfig::for_task(task.name).gamma);
    let restarts: Vec<RestartLog> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rr = rng::stream(seed, r as u64);
            let mut logits: Vec<f64> = (0..lat.groups).map(|_| cfg.init_std * rng::normal(&mut rr)).collect();
            let mut adam = AdamState::new(lat.groups);
            let mut ctrl = task.controller.clone();
            let mut history = Vec::with_capacity(cfg.iters + 1);
            for it in 0..=cfg.iters {
                let occ: Vec<f64> = lat.group.iter().map(|&g| sigmoid(logits[g])).collect();
                let built = task.build_scene(&lat.points, &actuator, &fibers, lat.volume, Some(&occ));
                let (scene, map) = match built {
                    Ok(s) => s,
                    Err(e) => {
                        log::debug!("baseline restart {r}: {e}");
                        history.push(SENTINEL);
                        break;
                    }
                };
                if it == cfg.iters {
                    let perf = tasks::rollout_task(task, &scene, &ctrl, mpm);
                    history.push(performance_or_sentinel(perf));
                    break;
                }
                let g = match tasks::scene_grad(task, &scene, &map, &ctrl, mpm) {
                    Ok(g) => g,
                    Err(e) => {
                        log::debug!("baseline restart {r} iter {it}: {e}");
                        history.push(SENTINEL);
                        break;
                    }
                };
                history.push(if g.performance.is_finite() { g.performance } else { SENTINEL });
                let d_occ = map.design_scale_grad(&g.sim.scale);
                let mut d_logit = vec![0.0; lat.groups];
                for (i, d) in d_occ.iter().enumerate() {
                    let o = occ[i];
                    d_logit[lat.group[i]] += d * o * (1.0 - o);
                }
                if d_logit.iter().all(|v| v.is_finite()) {
                    adam_step(&mut logits, &d_logit, &mut adam, cfg.design_lr).ok();
                }
                if gamma != 0.0 && g.controller.iter().all(|v| v.is_finite()) {
                    let mut p = ctrl.params();
                    for (v, d) in p.iter_mut().zip(&g.controller) {
                        *v -= gamma * d;
                    }
                    ctrl.set_params(&p).ok();
                }
            }
            let initial = history.first().copied().unwrap_or(SENTINEL);
            let best = history.iter().copied().fold(SENTINEL, f64::max);
            RestartLog {
                restart: r,
                initial,
                best,
                history,
            }
        })
        .collect();
    let best_restart = (0..restarts.len())
        .max_by(|&a, &b| restarts[a].best.total_cmp(&restarts[b].best).then(b.cmp(&a)))
        .expect("at least one restart");
    Ok(BaselineResult {
        kind,
        best: restarts[best_restart].best,
        best_restart,
        best_initial: restarts.iter().map(|r| r.initial).fold(SENTINEL, f64::max),
        restarts,
    })
}
