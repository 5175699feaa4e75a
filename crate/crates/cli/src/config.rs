//! Run configuration: defaults, `--config` files and `--set` overrides.

use std::path::PathBuf;

use mfg_core::codesign::{BaselineConfig, BaselineKind, CodesignConfig, EmbedOptimConfig};
use mfg_core::diffusion::{ScheduleConfig, TrainConfig};
use mfg_core::mpmsim::MpmConfig;
use mfg_core::robotize::RobotizeConfig;
use mfg_core::shapes::{CorpusConfig, DEFAULT_POINTS};
use mfg_core::tasks::TaskName;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// One conditioning source with its guidance weight. `source` is
/// `"embedding"` (the run's embedding file), `"family:<name>"` (a corpus
/// family label) or a path to an embedding JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionPart {
    pub source: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    pub n_points: usize,
    /// Empty: unconditional, or the run's embedding at `guidance_scale` when
    /// an embedding file is configured.
    pub condition: Vec<ConditionPart>,
    pub guidance_scale: f64,
    /// Also save `x_t` every this many steps (0 disables).
    pub snapshot_every: usize,
    /// Evaluate every sample on the task.
    pub evaluate: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            count: 4,
            n_points: DEFAULT_POINTS,
            condition: Vec::new(),
            guidance_scale: 2.0,
            snapshot_every: 0,
            evaluate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvaluateSection {
    /// Sample JSON files, or directories of them.
    pub inputs: Vec<PathBuf>,
    /// Controller JSON applied to every input; the task's prescribed one if unset.
    pub controller: Option<PathBuf>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    pub kinds: Vec<BaselineKind>,
    #[serde(flatten)]
    pub cfg: BaselineConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            kinds: vec![BaselineKind::Voxel, BaselineKind::Particle],
            cfg: BaselineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    /// Sample JSON to robotize, simulate and draw.
    pub input: Option<PathBuf>,
    pub controller: Option<PathBuf>,
    /// Draw every this many control steps.
    pub frame_every: usize,
    /// CSV to plot, with the column names for the axes.
    pub plot_csv: Option<PathBuf>,
    pub plot_x: String,
    pub plot_y: String,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            input: None,
            controller: None,
            frame_every: 10,
            plot_csv: None,
            plot_x: "epoch".into(),
            plot_y: "buffer_max".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskName,
    /// Root for run directories; `MFG_RUN_DIR` takes precedence.
    pub output_root: PathBuf,
    /// Name of the run directory under the root (the command name if unset).
    pub run_name: Option<String>,
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    /// Embedding-optimization state to resume from.
    pub resume: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Save an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub mpm: MpmConfig,
    pub robotize: RobotizeConfig,
    pub embed_optim: Option<EmbedOptimConfig>,
    pub codesign: Option<CodesignConfig>,
    pub sample: SampleSection,
    pub evaluate: EvaluateSection,
    pub baseline: BaselineSection,
    pub render: RenderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskName::Crawling,
            output_root: PathBuf::from("runs"),
            run_name: None,
            corpus_dir: None,
            checkpoint: None,
            embedding: None,
            resume: None,
            corpus: CorpusConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            mpm: MpmConfig::default(),
            robotize: RobotizeConfig::default(),
            embed_optim: None,
            codesign: None,
            sample: SampleSection::default(),
            evaluate: EvaluateSection::default(),
            baseline: BaselineSection::default(),
            render: RenderSection::default(),
        }
    }
}

impl RunConfig {
    pub fn embed_optim(&self) -> &EmbedOptimConfig {
        self.embed_optim.as_ref().expect("resolved")
    }

    pub fn codesign(&self) -> &CodesignConfig {
        self.codesign.as_ref().expect("resolved")
    }
}

/// Overlays `over` onto `base`; every key in `over` must already exist.
fn merge(base: &mut Value, over: &Value, path: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &p)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::Config(format!("unknown config key {p:?}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Parses `a.b.c=value` into a nested JSON object. Values parse as JSON,
/// falling back to a plain string.
fn parse_set(s: &str) -> Result<Value, CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut out = value;
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(CliError::Config(format!("bad config key {key:?}")));
        }
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), out);
        out = Value::Object(m);
    }
    Ok(out)
}

fn defaults_for(task: TaskName) -> Result<Value, CliError> {
    let cfg = RunConfig {
        task,
        embed_optim: Some(EmbedOptimConfig::for_task(task)),
        codesign: Some(CodesignConfig::for_task(task)),
        ..RunConfig::default()
    };
    serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))
}

/// Defaults, then the config file, then each `--set`, in that order. Task
/// dependent sections are filled from the resolved task.
pub fn resolve(file: Option<&serde_json::Value>, sets: &[String]) -> Result<RunConfig, CliError> {
    let overlays: Vec<Value> = file
        .cloned()
        .into_iter()
        .map(Ok)
        .chain(sets.iter().map(|s| parse_set(s)))
        .collect::<Result<_, _>>()?;
    let build = |task: TaskName| -> Result<RunConfig, CliError> {
        let mut v = defaults_for(task)?;
        for o in &overlays {
            merge(&mut v, o, "")?;
        }
        serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
    };
    let first = build(TaskName::Crawling)?;
    let cfg = if first.task == TaskName::Crawling { first } else { build(first.task)? };
    validate(&cfg)?;
    Ok(cfg)
}

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let c = |e: mfg_core::Error| CliError::Config(e.to_string());
    cfg.mpm.validate().map_err(c)?;
    cfg.embed_optim().validate().map_err(c)?;
    cfg.codesign().validate(cfg.schedule.steps).map_err(c)?;
    if cfg.sample.n_points == 0 {
        return Err(CliError::Config("sample.n_points must be positive".into()));
    }
    if cfg.train.batch_size == 0 {
        return Err(CliError::Config("train.batch_size must be positive".into()));
    }
    Ok(())
}
