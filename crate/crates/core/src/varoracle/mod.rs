//! Exact variational analysis used as the reference the network is judged against.

mod analysis;
mod covariance;
mod problem;

pub use analysis::{
    analysis_3dvar, cost_function, kalman_gain, minimize_cost, normal_equation_analysis, single_obs_increment,
    Analysis, LinearObsOperator, MAX_CONDITION,
};
pub use covariance::{CovarianceB, CovarianceR, StateLayout};
pub use problem::{window_vector, ObsRow, OracleProblem};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("innovation covariance is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid covariance: {0}")]
    Covariance(String),
    #[error("invalid observation operator: {0}")]
    Operator(String),
}
