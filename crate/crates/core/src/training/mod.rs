//! Contrastive alignment training: loss, AdamW and the epoch loop.

mod adamw;
mod loss;
mod trainer;

pub use adamw::{AdamWConfig, OptimState};
pub use loss::{infonce_loss, multi_positive_infonce};
pub use trainer::{
    continue_training, read_loss_csv, scene_embeddings, train, write_loss_csv, LossRecord,
    TrainOutcome, Trainer, EPOCH_KEY, LAMBDA_KEY,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::{FusionConfig, ModelError};
use crate::prompts::PromptError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set has no objects")]
    EmptyDataset,
    #[error("{0}")]
    Degenerate(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("class `{0}` is missing from the text source")]
    MissingClass(String),
    #[error("OOD object {0} in training data")]
    OodInTrain(u64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    2
}
fn default_base_lr() -> f64 {
    1.5e-4
}
fn default_halving() -> usize {
    2
}
fn default_lambda() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Scenes per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Epochs between learning-rate halvings.
    #[serde(default = "default_halving")]
    pub lr_halving_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Scene-context blend weight.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Parameter-name prefixes excluded from updates.
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            base_lr: default_base_lr(),
            lr_halving_period: default_halving(),
            seed: 0,
            lambda: default_lambda(),
            adamw: AdamWConfig::default(),
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be at least 1");
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr must be positive");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
            || !(a.weight_decay >= 0.0)
        {
            return bad("invalid AdamW hyperparameters");
        }
        self.fusion()?;
        Ok(())
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        Ok(FusionConfig::new(self.lambda)?)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Step schedule: the base rate halved every `lr_halving_period` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halving_period.max(1)) as i32;
    cfg.base_lr * 0.5f64.powi(halvings)
}
