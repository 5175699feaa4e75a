//! One function per subcommand. Each reads its inputs, writes its artifacts
//! through the run directory and never touches its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfg_core::codesign::{self, EmbedState, Env, EpochLog};
use mfg_core::denoiser::{self, AdamState, DenoiserParams, Embedding};
use mfg_core::diffusion::{self, Guidance, NoiseSchedule, SnapshotHook};
use mfg_core::mpmsim::{Controller, Rect};
use mfg_core::rng;
use mfg_core::robotize::robotize_x0;
use mfg_core::shapes::{self, PointSet, FAMILY_NAMES};
use mfg_core::tasks::{self, build_task, TaskSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::plot::line_plot;
use crate::run::RunDir;
use crate::CliError;

/// Seed, final sample, snapshots and optional performance of one sample.
type SampleRow = (u64, PointSet, Vec<(usize, PointSet)>, Option<f64>);

/// On-disk sample: the seed it was drawn with and its points.
#[derive(Serialize, Deserialize)]
pub struct SampleFile {
    pub seed: u64,
    pub points: PointSet,
}

/// Anything with a `points` field (samples, corpus shapes).
#[derive(Deserialize)]
struct PointsFile {
    points: PointSet,
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path.ok_or_else(|| CliError::Config(format!("{what} is not set")))?;
    if !p.exists() {
        return Err(CliError::Missing(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.clone())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))
}

fn load_params(cfg: &RunConfig) -> Result<DenoiserParams, CliError> {
    let path = require(cfg.checkpoint.as_ref(), "checkpoint")?;
    let f = fs::File::open(&path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let (p, _) = denoiser::read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(p)
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule, CliError> {
    NoiseSchedule::linear(&cfg.schedule).map_err(|e| CliError::Config(e.to_string()))
}

fn task(cfg: &RunConfig) -> TaskSpec {
    build_task(cfg.task, &cfg.mpm)
}

fn csv_row(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

fn embedding_source(source: &str, cfg: &RunConfig, dim: usize) -> Result<Embedding, CliError> {
    if source == "embedding" {
        let p = require(cfg.embedding.as_ref(), "embedding")?;
        return read_json(&p);
    }
    if let Some(name) = source.strip_prefix("family:") {
        let idx = FAMILY_NAMES
            .iter()
            .position(|f| *f == name)
            .ok_or_else(|| CliError::Config(format!("unknown family {name:?}")))?;
        return Ok(Embedding::new(shapes::family_label(idx, dim)));
    }
    let p = PathBuf::from(source);
    if !p.exists() {
        return Err(CliError::Missing(format!("embedding {source} does not exist")));
    }
    read_json(&p)
}

fn guidance(cfg: &RunConfig, dim: usize) -> Result<Guidance, CliError> {
    let check = |e: Embedding| {
        if e.dim() != dim {
            Err(CliError::Config(format!("embedding has dimension {}, model expects {dim}", e.dim())))
        } else {
            Ok(e)
        }
    };
    let parts = &cfg.sample.condition;
    if parts.is_empty() {
        return Ok(match &cfg.embedding {
            Some(_) => Guidance::cfg(check(embedding_source("embedding", cfg, dim)?)?, cfg.sample.guidance_scale),
            None => Guidance::Unconditional,
        });
    }
    let resolved: Vec<(Embedding, f64)> = parts
        .iter()
        .map(|p| Ok((check(embedding_source(&p.source, cfg, dim)?)?, p.weight)))
        .collect::<Result<_, CliError>>()?;
    Ok(if resolved.len() == 1 {
        let (e, w) = resolved.into_iter().next().expect("one part");
        Guidance::cfg(e, w)
    } else {
        Guidance::Composed { parts: resolved }
    })
}

pub fn gen_corpus(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let corpus = shapes::generate_corpus(&cfg.corpus)?;
    let mut metrics = String::from("index,family,points\n");
    for (i, s) in corpus.iter().enumerate() {
        let bytes = serde_json::to_vec(s).map_err(|e| CliError::Io(e.to_string()))?;
        run.write(&format!("corpus/shape_{i:05}.json"), bytes)?;
        metrics += &csv_row(&[i.to_string(), s.spec.family.name().into(), s.points.len().to_string()]);
    }
    run.write("metrics.csv", metrics)?;
    log::info!("wrote {} shapes", corpus.len());
    Ok(())
}

fn write_checkpoint(run: &mut RunDir, rel: &str, p: &DenoiserParams, opt: &AdamState) -> Result<(), CliError> {
    let mut buf = Vec::new();
    denoiser::write_checkpoint(&mut buf, p, Some(opt))?;
    run.write(rel, buf)
}

pub fn train(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let dir = require(cfg.corpus_dir.as_ref(), "corpus_dir")?;
    let corpus = shapes::read_corpus(&dir).map_err(|e| CliError::Missing(format!("{}: {e}", dir.display())))?;
    if corpus.is_empty() {
        return Err(CliError::Missing(format!("no shapes in {}", dir.display())));
    }
    let tc = &cfg.train;
    let data: Vec<(PointSet, Embedding)> = corpus
        .iter()
        .map(|s| (s.points.clone(), Embedding::new(s.spec.family.label_embedding(tc.embed_dim))))
        .collect();
    let sched = schedule(cfg)?;
    let mut p = DenoiserParams::init(tc.embed_dim, tc.seed)?;
    let mut opt = AdamState::new(p.len());
    let chunk = if cfg.checkpoint_every > 0 { cfg.checkpoint_every } else { tc.steps.max(1) };
    let mut metrics = String::from("step,loss\n");
    let mut start = 0;
    while start < tc.steps {
        let end = (start + chunk).min(tc.steps);
        diffusion::train(&mut p, &mut opt, &data, &sched, tc, start..end, |step, loss| {
            log::info!("step {step}: loss {loss:.5}");
            metrics += &csv_row(&[step.to_string(), loss.to_string()]);
        })?;
        if !p.is_finite() {
            return Err(CliError::Numerical(format!("non-finite parameters after step {end}")));
        }
        if cfg.checkpoint_every > 0 && end < tc.steps {
            write_checkpoint(run, &format!("checkpoints/ckpt_{end:07}.bin"), &p, &opt)?;
        }
        start = end;
    }
    write_checkpoint(run, "denoiser.ckpt", &p, &opt)?;
    run.write("metrics.csv", metrics)?;
    Ok(())
}

pub fn optimize_embedding(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let p = load_params(cfg)?;
    let sched = schedule(cfg)?;
    let t = task(cfg);
    let env = Env {
        params: &p,
        sched: &sched,
        task: &t,
        mpm: &cfg.mpm,
        robotize: &cfg.robotize,
    };
    let eo = cfg.embed_optim();
    let mut state = match &cfg.resume {
        Some(path) => {
            let path = require(Some(path), "resume state")?;
            read_json::<EmbedState>(&path)?
        }
        None => EmbedState::new(p.embed_dim()),
    };
    let before = p.checksum();
    let mut metrics = format!("{}\n", EpochLog::CSV_HEADER);
    while state.epoch < eo.max_epochs {
        let log = codesign::embed_optim_epoch(&mut state, &env, eo, cfg.seed)?;
        log::info!(
            "epoch {}: buffer mean {:.5} max {:.5}, sample mean {:.5}, |c| {:.4}",
            log.epoch,
            log.mean_performance,
            log.max_performance,
            log.sample_mean,
            log.embedding_norm
        );
        metrics += &format!("{}\n", log.csv_row());
    }
    if p.checksum() != before {
        return Err(CliError::Numerical("denoiser parameters changed during embedding optimization".into()));
    }
    run.write_json("embedding.json", &state.embedding)?;
    run.write_json("state.json", &state)?;
    run.write("metrics.csv", metrics)?;
    Ok(())
}

fn write_sample(run: &mut RunDir, i: usize, seed: u64, x: &PointSet) -> Result<(), CliError> {
    run.write_json(
        &format!("samples/sample_{i:04}.json"),
        &SampleFile {
            seed,
            points: x.clone(),
        },
    )
}

pub fn sample(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let p = load_params(cfg)?;
    let sched = schedule(cfg)?;
    let t = task(cfg);
    let g = guidance(cfg, p.embed_dim())?;
    let env = Env {
        params: &p,
        sched: &sched,
        task: &t,
        mpm: &cfg.mpm,
        robotize: &cfg.robotize,
    };
    let sc = &cfg.sample;
    let results: Vec<mfg_core::Result<SampleRow>> = (0..sc.count)
        .into_par_iter()
        .map(|i| {
            let seed = rng::split(cfg.seed, i as u64);
            let (x0, snaps) = if sc.snapshot_every > 0 {
                let mut hook = SnapshotHook::new(sc.snapshot_every);
                let x = diffusion::sample(&p, &g, &sched, sc.n_points, &mut codesign::sample_rng(seed), &mut hook)?;
                (x, hook.snapshots)
            } else {
                (codesign::sample_plain(&env, &g, sc.n_points, seed)?, Vec::new())
            };
            let perf = sc.evaluate.then(|| codesign::evaluate(&x0, &env));
            Ok((seed, x0, snaps, perf))
        })
        .collect();
    let mut metrics = String::from("index,seed,performance\n");
    for (i, r) in results.into_iter().enumerate() {
        let (seed, x0, snaps, perf) = r?;
        if !x0.is_finite() {
            return Err(CliError::Numerical(format!("sample {i} is not finite")));
        }
        write_sample(run, i, seed, &x0)?;
        for (t, x) in snaps {
            run.write_json(&format!("snapshots/sample_{i:04}_t{t:04}.json"), &x)?;
        }
        metrics += &csv_row(&[i.to_string(), seed.to_string(), perf.map_or(String::new(), |v| v.to_string())]);
    }
    run.write("metrics.csv", metrics)?;
    Ok(())
}

pub fn codesign(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let p = load_params(cfg)?;
    let sched = schedule(cfg)?;
    let t = task(cfg);
    let g = guidance(cfg, p.embed_dim())?;
    let env = Env {
        params: &p,
        sched: &sched,
        task: &t,
        mpm: &cfg.mpm,
        robotize: &cfg.robotize,
    };
    let sc = &cfg.sample;
    let results: Vec<mfg_core::Result<codesign::CodesignResult>> = (0..sc.count)
        .into_par_iter()
        .map(|i| codesign::sample_codesign(&env, &g, cfg.codesign(), sc.n_points, rng::split(cfg.seed, i as u64)))
        .collect();
    let mut metrics = String::from("index,seed,performance\n");
    let mut steps = String::from("index,t,k,loss,performance,grad_norm,eps_norm\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        let seed = rng::split(cfg.seed, i as u64);
        if !r.x0.is_finite() {
            return Err(CliError::Numerical(format!("sample {i} is not finite")));
        }
        write_sample(run, i, seed, &r.x0)?;
        run.write_json(&format!("controllers/controller_{i:04}.json"), &r.controller)?;
        metrics += &csv_row(&[i.to_string(), seed.to_string(), r.performance.to_string()]);
        for s in &r.steps {
            steps += &csv_row(&[
                i.to_string(),
                s.t.to_string(),
                s.k.to_string(),
                opt(s.loss),
                opt(s.performance),
                s.grad_norm.to_string(),
                s.eps_norm.to_string(),
            ]);
        }
    }
    run.write("metrics.csv", metrics)?;
    run.write("steps.csv", steps)?;
    Ok(())
}

fn sample_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(CliError::Missing(format!("input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("evaluate.inputs is empty".into()));
    }
    Ok(out)
}

fn controller_for(cfg: &RunConfig, path: Option<&PathBuf>, t: &TaskSpec) -> Result<Controller, CliError> {
    match path {
        Some(p) => {
            let p = require(Some(p), "controller")?;
            let c: Controller = read_json(&p)?;
            c.validate()?;
            if c.num_actuators() != t.controller.num_actuators() {
                return Err(CliError::Config(format!(
                    "controller drives {} actuators, task {} has {}",
                    c.num_actuators(),
                    cfg.task,
                    t.controller.num_actuators()
                )));
            }
            Ok(c)
        }
        None => Ok(t.controller.clone()),
    }
}

pub fn evaluate(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let files = sample_inputs(&cfg.evaluate.inputs)?;
    let t = task(cfg);
    let ctrl = controller_for(cfg, cfg.evaluate.controller.as_ref(), &t)?;
    let samples: Vec<PointSet> = files
        .iter()
        .map(|f| read_json::<PointsFile>(f).map(|s| s.points))
        .collect::<Result<_, _>>()?;
    let results: Vec<(f64, Option<String>)> = samples
        .par_iter()
        .map(|x| {
            let design = robotize_x0(x, t.workspace, t.actuators.as_ref(), &cfg.robotize);
            let perf = tasks::performance_or_sentinel(
                design
                    .as_ref()
                    .map_err(|e| mfg_core::Error::DegenerateGeometry(e.to_string()))
                    .and_then(|d| Ok(tasks::simulate(&t, d, &ctrl, &cfg.mpm)?.0)),
            );
            (perf, design.ok().and_then(|d| d.to_json().ok()))
        })
        .collect();
    let mut metrics = String::from("input,performance\n");
    for (i, (f, (perf, design))) in files.iter().zip(results).enumerate() {
        metrics += &csv_row(&[f.display().to_string(), perf.to_string()]);
        if let Some(d) = design {
            run.write(&format!("designs/design_{i:04}.json"), d + "\n")?;
        }
    }
    run.write("metrics.csv", metrics)?;
    Ok(())
}

pub fn baseline(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let t = task(cfg);
    let mut metrics = String::from("kind,restart,initial,best\n");
    let mut history = String::from("kind,restart,iter,performance\n");
    let mut summary = Vec::new();
    for &kind in &cfg.baseline.kinds {
        let r = codesign::run_baseline(kind, &t, &cfg.mpm, &cfg.baseline.cfg, cfg.seed)?;
        let name = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        log::info!("{name}: best {:.5} (restart {}), best initial {:.5}", r.best, r.best_restart, r.best_initial);
        for rs in &r.restarts {
            metrics += &csv_row(&[name.clone(), rs.restart.to_string(), rs.initial.to_string(), rs.best.to_string()]);
            for (it, v) in rs.history.iter().enumerate() {
                history += &csv_row(&[name.clone(), rs.restart.to_string(), it.to_string(), v.to_string()]);
            }
        }
        summary.push(serde_json::json!({
            "kind": name,
            "best": r.best,
            "best_restart": r.best_restart,
            "best_initial": r.best_initial,
        }));
    }
    run.write("metrics.csv", metrics)?;
    run.write("history.csv", history)?;
    run.write_json("summary.json", &summary)?;
    Ok(())
}

fn read_plot_csv(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| CliError::Missing(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("column {name:?} not in {}", path.display())))
    };
    let (ix, iy) = (col(x)?, col(y)?);
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Missing(e.to_string()))?;
        let parse = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        pts.push((parse(ix), parse(iy)));
    }
    Ok(pts)
}

pub fn render(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let rc = &cfg.render;
    if rc.input.is_none() && rc.plot_csv.is_none() {
        return Err(CliError::Config("render needs render.input and/or render.plot_csv".into()));
    }
    let mut summary = String::from("item,value\n");
    if let Some(input) = &rc.input {
        let path = require(Some(input), "render.input")?;
        let x: PointsFile = read_json(&path)?;
        let t = task(cfg);
        let ctrl = controller_for(cfg, rc.controller.as_ref(), &t)?;
        let design = robotize_x0(&x.points, t.workspace, t.actuators.as_ref(), &cfg.robotize)?;
        let (perf, scene, trace) = tasks::simulate(&t, &design, &ctrl, &cfg.mpm)?;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in trace.frames.iter().flatten() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0 + 0.03).max(0.06);
        let bottom = (c[1] - half).max(0.0).min(cfg.mpm.ground_y() - 0.01);
        let view = Rect {
            min: [c[0] - half, bottom],
            max: [c[0] + half, bottom + 2.0 * half],
        };
        let every = rc.frame_every.max(1);
        let last = trace.frames.len() - 1;
        for k in (0..=last).filter(|k| k % every == 0 || *k == last) {
            let svg = mfg_core::mpmsim::frame_svg(&scene, &trace.frames[k], &cfg.mpm, view);
            run.write(&format!("frames/frame_{k:04}.svg"), svg)?;
        }
        run.write("trajectory.csv", tasks::trace_csv(&scene, &trace))?;
        run.write("design.json", design.to_json()? + "\n")?;
        let _ = writeln!(summary, "performance,{perf}");
        let _ = writeln!(summary, "particles,{}", design.len());
    }
    if let Some(csv_path) = &rc.plot_csv {
        let path = require(Some(csv_path), "render.plot_csv")?;
        let pts = read_plot_csv(&path, &rc.plot_x, &rc.plot_y)?;
        run.write("plot.svg", line_plot(&pts, &rc.plot_x, &rc.plot_y))?;
        let _ = writeln!(summary, "plot_points,{}", pts.len());
    }
    run.write("metrics.csv", summary)?;
    Ok(())
}
