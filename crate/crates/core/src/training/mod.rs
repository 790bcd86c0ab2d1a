//! Pretraining, the alternating GAN loop, checkpointing and the ablation harness.

mod ablation;
mod adam;
mod gan;
mod log;
mod pretrain;
mod state;

use std::path::Path;

use fpdeblur_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation_suite, VariantEntry, VariantManifest, VARIANTS_FILE};
pub use adam::{Adam, ADAM_EPS};
pub use gan::{
    discriminator_update, evaluate_losses, generator_update, init_state, resume_training,
    run_training, train_step, FrozenNets, TrainOutcome, FINAL_DIR, LOG_FILE,
};
pub use log::{read_log, LogRecord};
pub use pretrain::{
    pretrain_ridge_extractor, pretrain_verifier, ridge_l1, verifier_separation, PairSampler,
    RidgeOutcome, Separation, VerifierOutcome, RIDGE_LOG_FILE, VERIFIER_LOG_FILE,
};
pub use state::{EpochRecord, TrainState};

use crate::dataops::GrayImage;
use crate::networks::NetConfig;
use crate::objective::{AblationFlags, LossWeights};
use crate::{Error, Result};

/// Hyperparameters of a GAN run (deblurring or ridge pretraining).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for 64² crops.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            net: NetConfig::desk(),
            ..Self::default()
        }
    }

    /// Ridge extractor schedule: same optimizer, 100 epochs.
    pub fn ridge_default() -> Self {
        Self {
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        check_adam(self.learning_rate, self.adam_beta1, self.adam_beta2)?;
        self.weights.validate()?;
        self.ablation.validate()?;
        self.net.validate()
    }
}

/// Schedule of the Siamese verifier pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierTrainConfig {
    pub epochs: usize,
    /// Pairs drawn per epoch by the balanced sampler.
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub margin: f64,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            pairs_per_epoch: 512,
            batch_size: 16,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            margin: crate::objective::CONTRASTIVE_MARGIN,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl VerifierTrainConfig {
    pub fn desk() -> Self {
        Self {
            net: NetConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, pairs_per_epoch and batch_size must be at least 1".into(),
            ));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        check_adam(self.learning_rate, self.adam_beta1, self.adam_beta2)?;
        self.net.validate()
    }
}

fn check_adam(lr: f64, b1: f64, b2: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
    }
    for (name, b) in [("adam_beta1", b1), ("adam_beta2", b2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
        }
    }
    Ok(())
}

/// Sample order of `epoch`, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub(crate) fn stack_images<'a>(imgs: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor> {
    let items: Vec<Tensor> = imgs.into_iter().map(GrayImage::to_tensor).collect();
    Ok(Tensor::stack(&items)?)
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
