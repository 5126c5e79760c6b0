//! Synthetic periodic atmosphere: the truth generator and the frozen forecast model.

mod grid;
mod model;
mod nature;
mod noise;

pub use grid::{lat_weights, GridSpec, GridState};
pub use model::{ModelConfig, ToyModel};
pub use nature::{climatology, generate_dataset, sample_rng, AtmosphereSet, NatureConfig};
pub use noise::NoiseSpec;

#[derive(Debug, thiserror::Error)]
pub enum AtmError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}
