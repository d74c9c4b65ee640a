//! Command-line front end: simulate cohorts, train, cross-validate, run the
//! bilateral experiment, predict, and replay a run from its manifest.

pub mod commands;
pub mod config;
pub mod manifest;

use clap::{Args, Parser, Subcommand};
use commands::{execute, Job};
use config::{ExperimentConfig, Overrides};
use eloquent::formats::read_file;
use eloquent::loss::LossMode;
use eloquent::model::Variant;
use manifest::RunManifest;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "eloquent", version, about = "Eloquent cortex localization from dynamic connectivity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Simulate(Common),
    /// Train one model on a whole cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// k-fold cross-validation with per-patient attention exports.
    Crossval {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on unilateral patients, test on bilateral ones.
    Bilateral {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Label one patient file with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patient: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rerun the command recorded in a manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with [synth], [window], [model] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub loss_mode: Option<LossMode>,
    #[arg(long)]
    pub folds: Option<usize>,
}

/// A failed command: exit status plus a machine-readable record.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub exit_code: i32,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

impl From<eloquent::Error> for CliError {
    fn from(e: eloquent::Error) -> Self {
        let (exit_code, kind) = if e.is_usage() {
            (EXIT_USAGE, "usage")
        } else {
            (EXIT_RUNTIME, "runtime")
        };
        CliError {
            exit_code,
            kind,
            message: e.to_string(),
        }
    }
}

impl CliError {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error record serializes")
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| eloquent::Error::Io(e).into())
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        variant: common.variant,
        loss_mode: common.loss_mode,
        folds: common.folds,
    });
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let (job, common) = match cli.command {
        Command::Simulate(common) => (Job::Simulate, common),
        Command::Train { cohort, common } => (Job::Train { cohort: absolute(&cohort)? }, common),
        Command::Crossval { cohort, common } => (Job::Crossval { cohort: absolute(&cohort)? }, common),
        Command::Bilateral { cohort, common } => (Job::Bilateral { cohort: absolute(&cohort)? }, common),
        Command::Predict {
            checkpoint,
            patient,
            common,
        } => (
            Job::Predict {
                checkpoint: absolute(&checkpoint)?,
                patient: absolute(&patient)?,
            },
            common,
        ),
        Command::Replay { manifest, out } => return replay(&manifest, &out),
    };
    let cfg = resolve(&common)?;
    Ok(execute(&job, cfg, &absolute(&common.out)?)?)
}

pub fn replay(manifest: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let m: RunManifest = serde_json::from_slice(&read_file(manifest)?).map_err(eloquent::Error::from)?;
    let job = Job::from_manifest(&m)?;
    Ok(execute(&job, m.config, &absolute(out)?)?)
}
