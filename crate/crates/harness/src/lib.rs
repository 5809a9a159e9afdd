//! Training and evaluation harness for the TransDiff latent generator.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ema;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, Phase, RunConfig, TrainConfig};
pub use dataset::{gen_synthetic, Dataset, SyntheticDatasetSpec};
pub use ema::{ema_update, Ema};
pub use error::{HarnessError, Result};
pub use optim::AdamW;
pub use train::Trainer;
