//! Forward noising, the denoising objective, guided ancestral (DDPM) sampling
//! and the predicted-clean-sample map.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, adam_step, AdamState, DenoiserParams, Embedding};
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::shapes::PointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Tables for `t = 1..=T`; accessors take the 1-based diffusion step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps < 1 {
            return Err(invalid("schedule needs at least one step"));
        }
        let n = cfg.steps;
        let betas = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &PointSet, t: usize, eps: &PointSet, sched: &NoiseSchedule) -> Result<PointSet> {
    sched.check_t(t)?;
    x0.check_same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(PointSet {
        points: &x0.points * a + &eps.points * b,
    })
}

/// `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &PointSet,
    t: usize,
    eps_hat: &PointSet,
    sched: &NoiseSchedule,
) -> Result<PointSet> {
    sched.check_t(t)?;
    x_t.check_same_shape(eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(PointSet {
        points: (&x_t.points - &(&eps_hat.points * b)) / a,
    })
}

/// Classifier-free guidance `eps_null + s (eps_cond - eps_null)`.
pub fn cfg_eps(eps_null: &PointSet, eps_cond: &PointSet, s: f64) -> Result<PointSet> {
    eps_null.check_same_shape(eps_cond)?;
    Ok(PointSet {
        points: &eps_null.points + &((&eps_cond.points - &eps_null.points) * s),
    })
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean(x_t: f64, eps_hat: f64, alpha_t: f64, alpha_bar_t: f64) -> f64 {
    (x_t - (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt() * eps_hat) / alpha_t.sqrt()
}

/// One ancestral step `x_t -> x_{t-1}`. At `t = 1` the posterior mean is
/// returned without noise.
pub fn ddpm_step(
    x_t: &PointSet,
    t: usize,
    eps_hat: &PointSet,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<PointSet> {
    sched.check_t(t)?;
    x_t.check_same_shape(eps_hat)?;
    let (alpha, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let mut out = x_t.clone();
    for (o, e) in out.points.iter_mut().zip(eps_hat.points.iter()) {
        *o = posterior_mean(*o, *e, alpha, ab);
    }
    if t > 1 {
        let var = (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab) * sched.beta(t);
        let sd = var.sqrt();
        for o in out.points.iter_mut() {
            *o += sd * rng::normal(rng);
        }
    }
    Ok(out)
}

/// How the noise prediction is conditioned during sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Guidance {
    Unconditional,
    ClassifierFree { embedding: Embedding, scale: f64 },
    /// `eps_null + sum_i w_i (eps_{c_i} - eps_null)`.
    Composed { parts: Vec<(Embedding, f64)> },
}

impl Guidance {
    pub fn cfg(embedding: Embedding, scale: f64) -> Self {
        Guidance::ClassifierFree { embedding, scale }
    }
}

/// Guided noise prediction at `(x, t)`.
pub fn guided_eps(p: &DenoiserParams, x: &PointSet, t: usize, g: &Guidance) -> Result<PointSet> {
    let null = Embedding::null(p.embed_dim());
    match g {
        Guidance::Unconditional => denoiser::forward(p, x, t, &null),
        Guidance::ClassifierFree { embedding, scale } => {
            let eps_null = denoiser::forward(p, x, t, &null)?;
            // With s = 0 or a null condition the formula collapses to eps_null.
            if *scale == 0.0 || embedding.is_null {
                return Ok(eps_null);
            }
            let eps_cond = denoiser::forward(p, x, t, embedding)?;
            cfg_eps(&eps_null, &eps_cond, *scale)
        }
        Guidance::Composed { parts } => compose_eps(p, x, t, parts),
    }
}

/// Score composition across several weighted conditions.
pub fn compose_eps(
    p: &DenoiserParams,
    x: &PointSet,
    t: usize,
    parts: &[(Embedding, f64)],
) -> Result<PointSet> {
    if parts.is_empty() {
        return Err(invalid("composition needs at least one part"));
    }
    let eps_null = denoiser::forward(p, x, t, &Embedding::null(p.embed_dim()))?;
    let mut acc = PointSet::zeros(x.len());
    for (c, w) in parts {
        let eps_c = denoiser::forward(p, x, t, c)?;
        acc.points += &((&eps_c.points - &eps_null.points) * *w);
    }
    Ok(PointSet {
        points: &eps_null.points + &acc.points,
    })
}

/// Called after every reverse step with the new state `x_t`; may overwrite it.
pub trait SampleHook {
    fn after_step(&mut self, t: usize, x: &mut PointSet) -> Result<()>;
}

pub struct NoHook;

impl SampleHook for NoHook {
    fn after_step(&mut self, _t: usize, _x: &mut PointSet) -> Result<()> {
        Ok(())
    }
}

/// Records `x_t` every `every` steps (and always the final sample).
pub struct SnapshotHook {
    pub every: usize,
    pub snapshots: Vec<(usize, PointSet)>,
}

impl SnapshotHook {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            snapshots: Vec::new(),
        }
    }
}

impl SampleHook for SnapshotHook {
    fn after_step(&mut self, t: usize, x: &mut PointSet) -> Result<()> {
        if t.is_multiple_of(self.every) {
            self.snapshots.push((t, x.clone()));
        }
        Ok(())
    }
}

/// Reverse diffusion from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample(
    p: &DenoiserParams,
    guidance: &Guidance,
    sched: &NoiseSchedule,
    n_points: usize,
    rng: &mut Rng,
    hook: &mut dyn SampleHook,
) -> Result<PointSet> {
    let mut x = PointSet::gaussian(n_points, rng);
    for t in (1..=sched.steps()).rev() {
        let eps = guided_eps(p, &x, t, guidance)?;
        x = ddpm_step(&x, t, &eps, sched, rng)?;
        hook.after_step(t - 1, &mut x)?;
    }
    Ok(x)
}

/// One minibatch of the denoising objective with classifier-free dropout:
/// each example draws `t ~ U[1, T]`, `eps ~ N(0, I)` and has its condition
/// replaced by the null embedding with probability `drop_prob`.
pub fn train_step(
    p: &DenoiserParams,
    batch: &[(PointSet, Embedding)],
    sched: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut Rng,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let null = Embedding::null(p.embed_dim());
    let draws: Vec<(usize, PointSet, bool)> = batch
        .iter()
        .map(|(x0, _)| {
            let t = rng.random_range(1..=sched.steps());
            let eps = PointSet::gaussian(x0.len(), rng);
            let drop = rng.random::<f64>() < drop_prob;
            (t, eps, drop)
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, DenoiserParams)>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|((x0, c), (t, eps, drop))| {
            let x_t = q_sample(x0, *t, eps, sched)?;
            let cond = if *drop { &null } else { c };
            let mut g = p.zeros_like();
            let (loss, _) = denoiser::denoising_loss(p, &x_t, *t, cond, eps, scale, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect();
    let mut grads = p.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        grads.axpy(1.0, &g);
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            drop_prob: 0.1,
            seed: 0,
            embed_dim: denoiser::DEFAULT_EMBED_DIM,
            log_every: 500,
        }
    }
}

/// Runs training steps `steps` (a sub-range of `0..cfg.steps`) on
/// `(x0, condition)` pairs. Every step draws from its own random stream, so
/// training in several chunks gives the same result as one call.
/// `on_log(step, mean_loss)` fires every `log_every` steps.
pub fn train(
    p: &mut DenoiserParams,
    opt: &mut AdamState,
    data: &[(PointSet, Embedding)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    steps: std::ops::Range<usize>,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let root = rng::split(cfg.seed, 0x7EA1);
    let mut losses = Vec::with_capacity(steps.len());
    let mut window = 0.0;
    for step in steps {
        let mut r = rng::stream(root, step as u64);
        let batch: Vec<(PointSet, Embedding)> = (0..cfg.batch_size.max(1))
            .map(|_| data[r.random_range(0..data.len())].clone())
            .collect();
        let (loss, grads) = train_step(p, &batch, sched, cfg.drop_prob, &mut r)?;
        adam_step(&mut p.data, &grads.data, opt, cfg.lr)?;
        losses.push(loss);
        window += loss;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            on_log(step + 1, window / cfg.log_every as f64);
            window = 0.0;
        }
    }
    Ok(losses)
}
