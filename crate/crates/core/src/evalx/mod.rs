//! Verification metrics, resampling statistics and the three-experiment comparison.

mod experiments;
mod metrics;
mod stats;


pub use experiments::{channel_names, run_experiments, EvalConfig, Experiment, ExperimentRun, Report};
pub use metrics::{block_mean, normalized_diff, regional_rmse, rmse, rmse_map, write_pgm};
pub use stats::{bootstrap_mean_ci, moving_average, spearman};

use crate::dataset::DataError;
use crate::danet::NetError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid region: {0}")]
    Region(String),
    #[error("reference RMSE is zero")]
    ZeroReference,
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{0}")]
    Io(String),
}
