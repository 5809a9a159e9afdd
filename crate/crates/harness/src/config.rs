//! Run configuration, read from TOML. Every key has a default and unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use transdiff_core::model::ModelConfig;
use transdiff_core::sampler::SamplerConfig;

use crate::dataset::SyntheticDatasetSpec;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    #[serde(rename = "pretrain-1step")]
    Pretrain1Step,
    FinetuneMrar,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain1Step => "pretrain-1step",
            Phase::FinetuneMrar => "finetune-mrar",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Phase::Pretrain1Step => 0,
            Phase::FinetuneMrar => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Phase::Pretrain1Step),
            1 => Some(Phase::FinetuneMrar),
            _ => None,
        }
    }
}

/// Learning rate at the reference batch size of the large-scale recipe.
pub const REFERENCE_LR: f64 = 8.0e-4;
pub const REFERENCE_BATCH: usize = 2048;
pub const FINETUNE_LR: f64 = 5.0e-5;
/// Pretrain steps per fine-tune step.
pub const PHASE_RATIO: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Overrides the phase default when set.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain1Step,
            lr: None,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 32,
            steps: 4000,
            ema_decay: 0.995,
            grad_clip: 1.0,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Square-root batch scaling of the reference rate for pretraining,
    /// the fixed fine-tune rate otherwise.
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.phase {
            Phase::Pretrain1Step => REFERENCE_LR * (self.batch_size as f64 / REFERENCE_BATCH as f64).sqrt(),
            Phase::FinetuneMrar => FINETUNE_LR,
        })
    }

    /// Fine-tune schedule matching a pretrain of `self.steps`.
    pub fn finetune(&self) -> Self {
        Self {
            phase: Phase::FinetuneMrar,
            lr: None,
            steps: (self.steps / PHASE_RATIO).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.effective_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(HarnessError::Config(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(HarnessError::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HarnessError::Config("betas must be in [0, 1)".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(HarnessError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub noise_std: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub held_out_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            seed: 0,
            train_per_class: 256,
            held_out_per_class: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.dataset_spec().verify_separation()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec::for_model(&self.model, self.data.noise_std, self.data.seed)
    }
}
