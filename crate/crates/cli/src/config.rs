use eloquent::connectivity::WindowConfig;
use eloquent::loss::LossMode;
use eloquent::model::{ModelConfig, Variant};
use eloquent::synthdata::SynthConfig;
use eloquent::training::TrainConfig;
use eloquent::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every stage's settings in one TOML file. Missing sections take their
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub loss_mode: Option<LossMode>,
    pub folds: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    /// `seed` drives both the generator and training.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        if let Some(m) = o.loss_mode {
            self.train.loss_mode = m;
        }
        if let Some(f) = o.folds {
            self.train.folds = f;
        }
    }

    /// Checks everything a training command needs.
    pub fn validate_training(&self) -> Result<()> {
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("[model]\nleaky_slope = 0.1\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.model.leaky_slope, 0.1);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.synth, SynthConfig::default());
        assert_eq!(cfg.window, WindowConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nepoch = 5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            variant: Some(Variant::MtAnn),
            loss_mode: Some(LossMode::SoftmaxCe),
            folds: Some(4),
        });
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.train.folds), (9, 9, 4));
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
