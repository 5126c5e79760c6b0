use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::toyatm::NoiseSpec;

use super::OracleError;

/// Window of state cells `(row, col)` of size `h × w` with `levels` vertical levels;
/// the state vector is ordered `(channel, row, col)` with temperature channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub h: usize,
    pub w: usize,
    pub levels: usize,
}

impl StateLayout {
    pub fn channels(&self) -> usize {
        2 * self.levels
    }

    pub fn dim(&self) -> usize {
        self.channels() * self.h * self.w
    }

    pub fn index(&self, ch: usize, i: usize, j: usize) -> usize {
        (ch * self.h + i) * self.w + j
    }

    pub fn decompose(&self, n: usize) -> (usize, usize, usize) {
        let plane = self.h * self.w;
        (n / plane, (n % plane) / self.w, n % self.w)
    }
}

/// Separable background-error covariance: Gaussian horizontal correlation, AR(1)
/// vertical correlation within each variable, no temperature-humidity cross terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceB {
    pub variances: Vec<f64>,
    /// Gaussian correlation length in grid cells.
    pub length_scale: f64,
    /// Correlation between adjacent levels.
    pub vertical_corr: f64,
}

impl CovarianceB {
    /// The covariance the background-noise generator draws from.
    pub fn from_noise(noise: &NoiseSpec) -> Self {
        Self {
            variances: noise.std.iter().map(|s| s * s).collect(),
            length_scale: noise.length_scale,
            vertical_corr: noise.vertical_corr,
        }
    }

    pub fn validate(&self, layout: &StateLayout) -> Result<(), OracleError> {
        if self.variances.len() != layout.channels() {
            return Err(OracleError::Covariance(format!(
                "{} variances for {} channels",
                self.variances.len(),
                layout.channels()
            )));
        }
        if self.variances.iter().any(|v| !(*v > 0.0)) || !(self.length_scale > 0.0) {
            return Err(OracleError::Covariance("variances and length scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.vertical_corr) {
            return Err(OracleError::Covariance(format!(
                "vertical correlation {} outside [0, 1)",
                self.vertical_corr
            )));
        }
        Ok(())
    }

    pub fn horizontal(&self, di: f64, dj: f64) -> f64 {
        (-(di * di + dj * dj) / (2.0 * self.length_scale * self.length_scale)).exp()
    }

    pub fn covariance(&self, layout: &StateLayout, a: usize, b: usize) -> f64 {
        let (ca, ia, ja) = layout.decompose(a);
        let (cb, ib, jb) = layout.decompose(b);
        let l = layout.levels;
        if ca / l != cb / l {
            return 0.0;
        }
        let vert = self.vertical_corr.powi((ca % l).abs_diff(cb % l) as i32);
        (self.variances[ca] * self.variances[cb]).sqrt()
            * vert
            * self.horizontal(ia as f64 - ib as f64, ja as f64 - jb as f64)
    }

    pub fn materialize(&self, layout: &StateLayout) -> Result<DMatrix<f64>, OracleError> {
        self.validate(layout)?;
        let n = layout.dim();
        Ok(DMatrix::from_fn(n, n, |a, b| self.covariance(layout, a, b)))
    }
}

/// Diagonal observation-error covariance, one variance per observation channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceR {
    pub variances: Vec<f64>,
}

impl CovarianceR {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.variances.is_empty() || self.variances.iter().any(|v| !(*v > 0.0)) {
            return Err(OracleError::Covariance("observation variances must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            variances: self.variances.iter().map(|v| v * s).collect(),
        }
    }

    /// Diagonal for a stacked observation vector whose rows belong to `channels`.
    pub fn diagonal(&self, channels: &[usize]) -> DVector<f64> {
        DVector::from_iterator(channels.len(), channels.iter().map(|&k| self.variances[k]))
    }
}
