use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};

use super::AtmError;

/// Regular latitude-longitude grid with a stack of pressure levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Latitude rows.
    pub h: usize,
    /// Longitude columns.
    pub w: usize,
    /// Pressure levels in hPa, top of the atmosphere first.
    pub levels: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            h: 64,
            w: 128,
            levels: vec![200.0, 300.0, 500.0, 700.0, 850.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), AtmError> {
        if self.h == 0 || self.w < 2 {
            return Err(AtmError::Grid(format!("extent {}x{} (need H>=1, W>=2)", self.h, self.w)));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|p| p[1] <= p[0]) {
            return Err(AtmError::Grid(format!("levels {:?} must be strictly increasing", self.levels)));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// State channels: temperature at every level, then humidity at every level.
    pub fn channels(&self) -> usize {
        2 * self.levels.len()
    }

    pub fn lat_spacing(&self) -> f64 {
        180.0 / self.h as f64
    }

    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.w as f64
    }

    /// Cell-center latitudes in degrees, south to north.
    pub fn latitudes(&self) -> Vec<f64> {
        let d = self.lat_spacing();
        (0..self.h).map(|i| -90.0 + d * (i as f64 + 0.5)).collect()
    }

    /// Cell-center longitudes in degrees east, starting at 0.
    pub fn longitudes(&self) -> Vec<f64> {
        let d = self.lon_spacing();
        (0..self.w).map(|j| d * j as f64).collect()
    }

    /// Row weights `H·cos φ_i / Σ cos φ_j`; they average to one.
    pub fn lat_weights(&self) -> Vec<f64> {
        lat_weights(&self.latitudes())
    }

    pub fn t_channel(&self, level: usize) -> usize {
        level
    }

    pub fn q_channel(&self, level: usize) -> usize {
        self.levels.len() + level
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.h, self.w]
    }
}

/// `n·cos φ_i / Σ cos φ_j` for an arbitrary set of row latitudes (degrees).
pub fn lat_weights(lats: &[f64]) -> Vec<f64> {
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos()).collect();
    let total: f64 = cos.iter().sum();
    cos.iter().map(|c| lats.len() as f64 * c / total).collect()
}

/// Atmospheric state `[2L, H, W]`: temperature (K) per level then humidity (%) per level.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState<T: Scalar = f64> {
    pub fields: Tensor<T>,
}

impl<T: Scalar> GridState<T> {
    pub fn new(grid: &GridSpec, fields: Tensor<T>) -> Result<Self, AtmError> {
        if fields.shape() != grid.shape() {
            return Err(AtmError::Grid(format!(
                "state shape {:?} does not match grid {:?}",
                fields.shape(),
                grid.shape()
            )));
        }
        Ok(Self { fields })
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            fields: Tensor::zeros(&grid.shape()),
        }
    }

    pub fn n_levels(&self) -> usize {
        self.fields.shape()[0] / 2
    }

    pub fn temperature(&self, level: usize) -> &[T] {
        self.fields.plane(level)
    }

    pub fn humidity(&self, level: usize) -> &[T] {
        self.fields.plane(self.n_levels() + level)
    }

    /// `(T, Q)` profiles of one column, top level first.
    pub fn column(&self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        let l = self.n_levels();
        let t = (0..l).map(|k| self.fields.at3(k, i, j).as_f64()).collect();
        let q = (0..l).map(|k| self.fields.at3(l + k, i, j).as_f64()).collect();
        (t, q)
    }

    pub fn clip_humidity(&mut self) {
        let l = self.n_levels();
        let hundred = T::of(100.0);
        for k in l..2 * l {
            for v in self.fields.plane_mut(k) {
                *v = v.max(T::zero()).min(hundred);
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        let l = self.n_levels();
        self.fields.all_finite()
            && (l..2 * l).all(|k| {
                self.fields
                    .plane(k)
                    .iter()
                    .all(|&v| v >= T::zero() && v <= T::of(100.0))
            })
    }

    pub fn cast<U: Scalar>(&self) -> GridState<U> {
        GridState {
            fields: self.fields.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latitudes_are_symmetric_cell_centres() {
        let g = GridSpec::default();
        let lats = g.latitudes();
        assert!((lats[0] + 90.0 - g.lat_spacing() / 2.0).abs() < 1e-12);
        assert!((lats[g.h - 1] - 90.0 + g.lat_spacing() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn lat_weights_positive_and_average_to_one() {
        for h in [1, 2, 7, 64, 721] {
            let g = GridSpec { h, ..GridSpec::default() };
            let w = g.lat_weights();
            assert!(w.iter().all(|&x| x > 0.0));
            let mean = w.iter().sum::<f64>() / h as f64;
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(GridSpec { w: 1, ..GridSpec::default() }.validate().is_err());
        assert!(GridSpec { levels: vec![500.0, 300.0], ..GridSpec::default() }.validate().is_err());
    }
}
