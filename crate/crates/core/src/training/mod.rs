//! Losses, learning-rate schedule, optimizer and the joint assimilation-plus-rollout
//! training loop.

mod loss;
mod optim;
mod schedule;
mod trainer;

#[cfg(test)]
mod tests;

pub use loss::{total_loss, weighted_l1};
pub use optim::AdamW;
pub use schedule::{lr_at_step, TrainConfig};
pub use trainer::{
    checkpoint_of, fit_normalization, restore, sample_order, train, write_loss_csv, LossRecord, TrainState,
};

use std::path::PathBuf;

use crate::danet::NetError;
use crate::formats::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("step {step} outside 1..={total}")]
    StepRange { step: u64, total: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step} (last checkpoint: {})", .checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite { step: u64, checkpoint: Option<PathBuf> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Io(String),
}
