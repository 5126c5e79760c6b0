//! Synthetic infrared radiometer, footprint generation and super-observation gridding.

mod channel;
mod superobs;

pub use channel::{limb_factor, weighting_function, ChannelSpec, Radiometer, Sky, WeightingFunction};
pub use superobs::{
    cell_of, encode_aux, frame_center, frame_of, make_superobs, synthesize_observations, Crop, ObsConfig,
    ObsFootprint, SuperObsGrid, AUX_PLANES, HALF_WINDOW_MIN, MAX_ZENITH,
};

#[derive(Debug, thiserror::Error)]
pub enum ObsError {
    #[error("invalid channel: {0}")]
    Channel(String),
    #[error("invalid levels: {0}")]
    Levels(String),
    #[error("invalid crop: {0}")]
    Crop(String),
    #[error("invalid footprint: {0}")]
    Footprint(String),
    #[error("invalid observation config: {0}")]
    Config(String),
}

#[cfg(test)]
mod tests;
