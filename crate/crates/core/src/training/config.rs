use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::GenLossMode;
use crate::models::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// K+1-class discriminator on labeled, unlabeled and generated data.
    #[default]
    Ssgan,
    /// Classic GAN with a single sigmoid unit.
    Vanilla,
    /// The discriminator alone, trained on labeled samples only.
    Supervised,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssgan" => Ok(Self::Ssgan),
            "vanilla" => Ok(Self::Vanilla),
            "supervised" => Ok(Self::Supervised),
            _ => Err(Error::invalid(format!("unknown algorithm `{s}` (ssgan, vanilla, supervised)"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ssgan => "ssgan",
            Self::Vanilla => "vanilla",
            Self::Supervised => "supervised",
        })
    }
}

/// How the discriminator's batchnorm layers see real and generated rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnBatches {
    /// One forward pass over the concatenated `2m` batch.
    #[default]
    Joint,
    /// Real and generated halves are normalized by their own statistics;
    /// running averages track the real half only.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    /// `m`: real samples per step (the discriminator sees `m` real plus
    /// `m` generated).
    pub batch_size: usize,
    /// `I`.
    pub iterations: u64,
    /// Discriminator updates per iteration of the vanilla algorithm.
    pub k_steps: usize,
    /// Share of training labels withheld when the split is made.
    pub unlabeled_fraction: f64,
    /// Epochs between evaluations on the test split.
    pub eval_interval: u64,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub gen_loss: GenLossMode,
    pub bn_batches: BnBatches,
    /// One-sided smoothing of the supervised target; 1.0 disables it.
    pub label_smoothing: f64,
    pub seed: u64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ssgan,
            batch_size: 64,
            iterations: 1000,
            k_steps: 1,
            unlabeled_fraction: 0.1,
            eval_interval: 100,
            checkpoint_interval: 0,
            gen_loss: GenLossMode::FeatureMatching,
            bn_batches: BnBatches::Joint,
            label_smoothing: crate::losses::DEFAULT_SMOOTHING,
            seed: 0,
            lr_d: 2e-4,
            lr_g: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch_size: 256,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.k_steps == 0 {
            return bad("k_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return bad(format!("unlabeled_fraction must be in [0, 1], got {}", self.unlabeled_fraction));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be >= 1".into());
        }
        if !(self.label_smoothing > 0.0 && self.label_smoothing <= 1.0) {
            return bad(format!("label_smoothing must be in (0, 1], got {}", self.label_smoothing));
        }
        for (name, lr) in [("lr_d", self.lr_d), ("lr_g", self.lr_g), ("adam_eps", self.adam_eps)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be >= 1".into());
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be below 2^63, got {}", self.seed));
        }
        Ok(())
    }

    pub fn smoothing(&self) -> Option<f64> {
        (self.label_smoothing < 1.0).then_some(self.label_smoothing)
    }
}

/// Everything that determines a run's models and optimizer: echoed into
/// every checkpoint so it can be rebuilt without outside configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub training: TrainingConfig,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}
