//! Three-branch assimilation network (background, observation and mixed flows joined
//! by fusion modules) and the background-only correction network.

mod inputs;
mod layers;
mod net;

pub use inputs::{NetInputs, Normalization};
pub use net::{DaNet, Variant};

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;
use crate::obsmodel::{Crop, AUX_PLANES};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Shape contract of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Widths of the down-1, down-2 and up stages.
    pub widths: [usize; 3],
    /// Background channels.
    pub channels: usize,
    pub frames: usize,
    pub obs_channels: usize,
    /// Grid extent.
    pub h: usize,
    pub w: usize,
    /// Observation window on the grid.
    pub crop: Crop,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 32],
            channels: 10,
            frames: 3,
            obs_channels: 3,
            h: 64,
            w: 128,
            crop: Crop { row: 16, col: 48, h: 32, w: 32 },
        }
    }
}

impl NetConfig {
    /// Observation-flow input channels: BT channels plus encodings, per frame.
    pub fn obs_planes(&self) -> usize {
        self.frames * (self.obs_channels + AUX_PLANES)
    }

    pub fn mixed_planes(&self) -> usize {
        self.channels + self.obs_planes()
    }

    /// Extent the network works on: the grid trimmed to multiples of 4.
    pub fn work_extent(&self) -> (usize, usize) {
        (self.h - self.h % 4, self.w - self.w % 4)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let (h, w) = self.work_extent();
        let c = self.crop;
        let mut problems = Vec::new();
        if self.widths.iter().any(|&x| x == 0) || self.channels == 0 || self.frames == 0 || self.obs_channels == 0 {
            problems.push("widths, channels, frames and obs channels must be positive".to_string());
        }
        if h < 4 || w < 4 {
            problems.push(format!("grid {}x{} too small", self.h, self.w));
        }
        if c.row % 4 != 0 || c.col % 4 != 0 {
            problems.push(format!("crop origin ({}, {}) must be a multiple of 4", c.row, c.col));
        }
        if c.h == 0 || c.w == 0 || c.h % 16 != 0 || c.w % 16 != 0 {
            problems.push(format!("crop extent {}x{} must be a positive multiple of 16", c.h, c.w));
        }
        if c.row + c.h > h || c.col + c.w > w {
            problems.push(format!("crop {c:?} outside the {h}x{w} working grid"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NetError::Config(problems.join("; ")))
        }
    }
}
