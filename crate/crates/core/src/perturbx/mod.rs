//! Single-observation perturbation experiments: two inferences differing in one
//! super-observation, and the physical-consistency checks run on their difference.

mod battery;
mod increment;


pub use battery::{choose_targets, consistency_battery, crop_norm, Battery, BatteryRow, Outcome, Targets};
pub use increment::{oracle_increment, GainKind, perturb_obs, perturbed_increment, OracleSetup, PerturbSpec, SkyKind, WindowPos};

use crate::danet::NetError;
use crate::evalx::EvalError;
use crate::varoracle::OracleError;

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("invalid perturbation: {0}")]
    Spec(String),
    #[error("target ({row}, {col}) is masked in frame {frame}")]
    Masked { row: usize, col: usize, frame: usize },
    #[error("no suitable target: {0}")]
    NoTarget(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
