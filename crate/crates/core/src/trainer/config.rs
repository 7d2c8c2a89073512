use serde::{Deserialize, Serialize};

use crate::dataset::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelDims, QueryInit};

/// Whether the view-query gate is learned or pinned to the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Queries start standard normal and are trained.
    Learned,
    /// Queries are all ones and frozen, so f_hat == f.
    Identity,
}

impl GateMode {
    pub fn query_init(self) -> QueryInit {
        match self {
            GateMode::Learned => QueryInit::Normal,
            GateMode::Identity => QueryInit::Ones,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means `ceil(train_size / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub stop_gradient_pv: bool,
    pub gate: GateMode,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub balance_actions: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Synthetic data, 32x32 input, 30 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            steps_per_epoch: None,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![10, 30],
            lr_drop_factor: 10.0,
            seed: 0,
            loss_weights: LossWeights::default(),
            stop_gradient_pv: false,
            gate: GateMode::Learned,
            input_size: 32,
            channels: vec![16, 32, 64],
            augment: true,
            augmentation: AugmentConfig::default(),
            balance_actions: false,
            eval_batch_size: 256,
        }
    }

    /// Directory data at 224x224, 50 epochs.
    pub fn paper() -> Self {
        Self {
            epochs: 50,
            input_size: 224,
            ..Self::desk()
        }
    }

    /// D = 8 on 8x8 inputs; small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            epochs: 2,
            batch_size: 2,
            input_size: 8,
            channels: vec![4, 8, 8],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected desk, paper or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("input_size", self.input_size),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("train.{key} must be positive")));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("train.steps_per_epoch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be >= 0"));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config("train.lr_drop_factor must be >= 1"));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "train.lr_drop_epochs must be strictly increasing",
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "train.channels must be non-empty and positive",
            ));
        }
        self.loss_weights.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr / self.lr_drop_factor.powi(drops as i32)
    }

    pub fn model_dims(&self, num_actions: usize, num_views: usize) -> ModelDims {
        ModelDims {
            input_size: self.input_size,
            channels: self.channels.clone(),
            num_actions,
            num_views,
        }
    }
}
