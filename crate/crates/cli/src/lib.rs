//! Experiment runner: flags and config merging, then one function per
//! subcommand.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use xvol::error::ErrorClass;
use xvol::{Error, Precision, Result};

pub use commands::AblateKind;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "xvol", version, about = "Volumetric cross-attention classifier: data, training, saliency, profiling")]
pub struct Cli {
    /// JSON run configuration; unspecified fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config field by dotted name, e.g. `train.lambda=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed of the run (`phantom.seed` for `phantom`, `train.seed` otherwise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Independent trials, each with its own seed.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Run trials concurrently; each trial stays deterministic.
    #[arg(long, global = true)]
    pub parallel: bool,
    /// Output directory (default `runs`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Fine-tune even without a trained stage-1 model.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Phantom,
    /// Stage-1 supervised training, one model per trial.
    Train,
    /// Stage-2 consistency fine-tuning of the stage-1 models.
    Finetune,
    /// Metrics of a saved model on the test split.
    Eval,
    /// CARE and Grad-CAM heatmaps for one volume.
    Saliency,
    /// Parameter and FLOP counts per layer.
    Profile,
    /// Sweep one design choice and tabulate mean ± std over trials.
    Ablate { kind: AblateKind },
    /// Simulated federated averaging over client manifests.
    Fedavg,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Saliency => "saliency",
            Command::Profile => "profile",
            Command::Ablate { .. } => "ablate",
            Command::Fedavg => "fedavg",
        }
    }
}

/// Defaults, then the config file, `XVOL_PRECISION`, flags and `--set`
/// assignments in that order.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if std::env::var_os("XVOL_PRECISION").is_some() {
        cfg.precision = Precision::from_env()?;
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Phantom => cfg.phantom.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    if let Some(t) = cli.trials {
        cfg.train.trials = t;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.parallel |= cli.parallel;
    cfg.finetune.force |= cli.force;
    for s in &cli.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! by_precision {
    ($p:expr, $f:ident, $($arg:expr),*) => {
        match $p {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

/// Echoes the effective config, then runs the command. Returns the report
/// printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = effective_config(cli)?;
    cfg.echo(cli.command.name())?;
    match &cli.command {
        Command::Phantom => commands::phantom(&cfg),
        Command::Profile => commands::profile(&cfg),
        Command::Train => by_precision!(cfg.precision, train, &cfg),
        Command::Finetune => by_precision!(cfg.precision, finetune, &cfg),
        Command::Ablate { kind } => by_precision!(cfg.precision, ablate, &cfg, *kind),
        Command::Fedavg => by_precision!(cfg.precision, fedavg, &cfg),
        Command::Eval => {
            let p = commands::precision_for(&cfg, cfg.eval.model.as_deref())?;
            by_precision!(p, eval, &cfg)
        }
        Command::Saliency => {
            let p = commands::precision_for(&cfg, cfg.saliency.model.as_deref())?;
            by_precision!(p, saliency, &cfg)
        }
    }
}

/// 0 success, 1 usage or config, 2 data or format, 3 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}
