//! Command-line driver: config loading, run directories and the four commands.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use ablate::{ablation_arms, cmd_ablate, ArmSummary};
pub use commands::{cmd_evaluate, cmd_finetune, cmd_pretrain, load_field};
pub use config::{config_to_string, load_config, parse_config, Overrides};
pub use error::{CliError, Result};
pub use manifest::{Artifact, ExperimentManifest};

#[derive(Debug, Parser)]
#[command(name = "acflow", version, about = "Flow matching pretraining and actor-critic fine-tuning on toy tasks")]
pub struct Cli {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides one config key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = config::parse_assignment)]
    pub set: Vec<(String, String)>,
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a vector field on the task's target distribution.
    Pretrain,
    /// Fine-tune a pretrained field with the configured weighting scheme.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample from a field and write a metric report and a sample dump.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the stabilization ablation; pretrains first without `--checkpoint`.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Repeat the run recorded in a manifest into `--out-dir`.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Executes one command; returns the path of the run manifest.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let out = cli.out_dir.as_path();
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(manifest, out);
    }
    let overrides = Overrides {
        seed: cli.seed,
        set: cli.set.clone(),
    };
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, out),
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, checkpoint, out),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, checkpoint, out),
        Command::Ablate { checkpoint } => cmd_ablate(&cfg, checkpoint.as_deref(), out).map(|(p, _)| p),
        Command::Rerun { .. } => unreachable!("handled above"),
    }
}

/// Rebuilds the configuration from the manifest's snapshot and runs the same
/// command on the same input checkpoint.
pub fn rerun(manifest: &Path, out: &Path) -> Result<PathBuf> {
    let m = ExperimentManifest::read(manifest)?;
    let cfg = parse_config(&m.config)?;
    commands::check_snapshot(&m.config, &cfg)?;
    cfg.validate()?;
    let checkpoint = || {
        m.input("checkpoint")
            .map(|a| a.path.clone())
            .ok_or_else(|| CliError::Config(format!("manifest for `{}` records no input checkpoint", m.command)))
    };
    match m.command.as_str() {
        "pretrain" => cmd_pretrain(&cfg, out),
        "finetune" => cmd_finetune(&cfg, &checkpoint()?, out),
        "evaluate" => cmd_evaluate(&cfg, &checkpoint()?, out),
        "ablate" => cmd_ablate(&cfg, m.input("checkpoint").map(|a| a.path.as_path()), out).map(|(p, _)| p),
        other => Err(CliError::Config(format!("unknown command `{other}` in manifest"))),
    }
}
