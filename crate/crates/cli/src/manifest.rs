use crate::commands::Job;
use crate::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub patient: Option<PathBuf>,
}

/// Everything needed to rerun a command: the resolved configuration, its
/// inputs and the seed. Timestamps are informational only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs: Inputs,
    pub output: PathBuf,
    /// Milliseconds since the Unix epoch.
    pub started_ms: u128,
    pub finished_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(job: &Job, cfg: &ExperimentConfig, out: &Path) -> Self {
        let seed = match job {
            Job::Simulate => cfg.synth.seed,
            _ => cfg.train.seed,
        };
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: job.name().to_string(),
            seed,
            config: cfg.clone(),
            inputs: job.inputs(),
            output: out.to_path_buf(),
            started_ms: now_ms(),
            finished_ms: 0,
        }
    }

    /// Records the configuration as the command finally used it.
    pub fn finish(&mut self, cfg: ExperimentConfig) {
        self.config = cfg;
        self.finished_ms = now_ms();
    }
}
