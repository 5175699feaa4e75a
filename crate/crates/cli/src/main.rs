//! `mfg`: experiment runner for point-set diffusion soft-robot co-design.

mod commands;
mod config;
mod plot;
mod run;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 1).
    Config(String),
    /// A referenced input artifact is missing or unreadable (exit 2).
    Missing(String),
    /// Numerical failure during a run (exit 3).
    Numerical(String),
    /// Failure writing outputs (exit 1).
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<mfg_core::Error> for CliError {
    fn from(e: mfg_core::Error) -> Self {
        use mfg_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::Config(_) => CliError::Config(e.to_string()),
            E::Checkpoint(_) | E::Json(_) => CliError::Missing(e.to_string()),
            E::Io(_) => CliError::Io(e.to_string()),
            E::Numerical { .. } | E::DegenerateGeometry(_) => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Physics-augmented point-set diffusion for 2D soft-robot co-design")]
struct Cli {
    /// JSON run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set codesign.k=0` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for parallel sampling and rollouts.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory (default: `<output root>/<run name or command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the procedural shape corpus.
    GenCorpus,
    /// Train the denoiser on a corpus.
    Train,
    /// Optimize a task embedding against simulated performance.
    OptimizeEmbedding,
    /// Draw (optionally guided) samples.
    Sample,
    /// Sample with diffusion-as-co-design steps.
    Codesign,
    /// Evaluate saved samples on a task.
    Evaluate,
    /// Run the voxel and particle co-optimization baselines.
    Baseline,
    /// Draw simulation frames and metric plots as SVG.
    Render,
    /// Print the fully resolved configuration.
    ShowConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::OptimizeEmbedding => "optimize-embedding",
            Command::Sample => "sample",
            Command::Codesign => "codesign",
            Command::Evaluate => "evaluate",
            Command::Baseline => "baseline",
            Command::Render => "render",
            Command::ShowConfig => "show-config",
        }
    }
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let cfg = config::resolve(file.as_ref(), &cli.sets)?;
    if cli.command == Command::ShowConfig {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
        // A closed pipe (e.g. `| head`) is not an error.
        return match writeln!(std::io::stdout(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(e.to_string())),
            _ => Ok(()),
        };
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let root = match (&cli.out, std::env::var_os("MFG_RUN_DIR")) {
        (Some(out), _) => out.clone(),
        (None, Some(env)) => PathBuf::from(env).join(cfg.run_name.as_deref().unwrap_or(cli.command.name())),
        (None, None) => cfg.output_root.join(cfg.run_name.as_deref().unwrap_or(cli.command.name())),
    };
    let mut run = run::RunDir::create(root)?;
    run::init_logging(Some(&run.path(run::LOG_FILE)));
    log::info!("{} -> {}", cli.command.name(), run.root.display());
    run.write_json("config.json", &cfg)?;
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg, &mut run)?,
        Command::Train => commands::train(&cfg, &mut run)?,
        Command::OptimizeEmbedding => commands::optimize_embedding(&cfg, &mut run)?,
        Command::Sample => commands::sample(&cfg, &mut run)?,
        Command::Codesign => commands::codesign(&cfg, &mut run)?,
        Command::Evaluate => commands::evaluate(&cfg, &mut run)?,
        Command::Baseline => commands::baseline(&cfg, &mut run)?,
        Command::Render => commands::render(&cfg, &mut run)?,
        Command::ShowConfig => unreachable!(),
    }
    let dir = run.finish()?;
    log::info!("done: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            run::init_logging(None);
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
