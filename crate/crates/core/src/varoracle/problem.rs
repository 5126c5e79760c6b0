use nalgebra::{DMatrix, DVector};

use crate::diffcore::Scalar;
use crate::obsmodel::{Crop, Radiometer, SuperObsGrid};
use crate::toyatm::{GridSpec, GridState};

use super::{
    analysis_3dvar, kalman_gain, Analysis, CovarianceB, CovarianceR, LinearObsOperator, OracleError, StateLayout,
};

/// One row of the stacked observation vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRow {
    pub frame: usize,
    pub channel: usize,
    /// Grid indices of the observed cell.
    pub row: usize,
    pub col: usize,
    pub zenith: f64,
}

/// Eq.-1 instance on a window of the grid: background sub-state, clear-sky
/// super-observations inside the window, and the matching `H`, `B` and `R`.
#[derive(Debug, Clone)]
pub struct OracleProblem {
    pub window: Crop,
    pub layout: StateLayout,
    pub xb: DVector<f64>,
    pub yo: DVector<f64>,
    pub h: LinearObsOperator,
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
    pub rows: Vec<ObsRow>,
}

/// Flattens a window of a state into the `(channel, row, col)` vector order.
pub fn window_vector<T: Scalar>(state: &GridState<T>, window: Crop, levels: usize) -> DVector<f64> {
    let layout = StateLayout { h: window.h, w: window.w, levels };
    DVector::from_fn(layout.dim(), |n, _| {
        let (c, i, j) = layout.decompose(n);
        state.fields.at3(c, window.row + i, window.col + j).as_f64()
    })
}

impl OracleProblem {
    /// Cloud-affected super-observations (any cloudy footprint) are screened out.
    pub fn build<T: Scalar>(
        grid: &GridSpec,
        background: &GridState<T>,
        obs: &SuperObsGrid,
        radiometer: &Radiometer,
        b: &CovarianceB,
        r: &CovarianceR,
        window: Crop,
    ) -> Result<Self, OracleError> {
        let oc = obs.crop;
        if window.row < oc.row || window.col < oc.col || window.row + window.h > oc.row + oc.h || window.col + window.w > oc.col + oc.w {
            return Err(OracleError::Dimension(format!("window {window:?} not inside observation crop {oc:?}")));
        }
        r.validate()?;
        if r.variances.len() != obs.channels {
            return Err(OracleError::Covariance(format!(
                "{} observation variances for {} channels",
                r.variances.len(),
                obs.channels
            )));
        }
        let levels = grid.n_levels();
        let layout = StateLayout { h: window.h, w: window.w, levels };
        let bm = b.materialize(&layout)?;
        let xb = window_vector(background, window, levels);

        let mut rows = Vec::new();
        let mut yo = Vec::new();
        let plane = oc.h * oc.w;
        for f in 0..obs.frames {
            for i in window.row..window.row + window.h {
                for j in window.col..window.col + window.w {
                    let (ci, cj) = (i - oc.row, j - oc.col);
                    if !obs.is_valid(f, ci, cj) || obs.cloud.data()[f * plane + ci * oc.w + cj] > 0.0 {
                        continue;
                    }
                    let cosz = obs.aux.at3(f * crate::obsmodel::AUX_PLANES + 2, ci, cj) as f64;
                    let zenith = cosz.clamp(-1.0, 1.0).acos().to_degrees();
                    for k in 0..obs.channels {
                        rows.push(ObsRow { frame: f, channel: k, row: i, col: j, zenith });
                        yo.push(obs.bt_at(f, k, ci, cj) as f64);
                    }
                }
            }
        }
        let mut hm = DMatrix::zeros(rows.len(), layout.dim());
        for (n, o) in rows.iter().enumerate() {
            let (jt, jq) = radiometer.jacobian_bt(o.channel, o.zenith);
            let (i, j) = (o.row - window.row, o.col - window.col);
            for l in 0..levels {
                hm[(n, layout.index(l, i, j))] = jt[l];
                hm[(n, layout.index(levels + l, i, j))] = jq[l];
            }
        }
        let channels: Vec<usize> = rows.iter().map(|o| o.channel).collect();
        Ok(Self {
            window,
            layout,
            xb,
            yo: DVector::from_vec(yo),
            h: LinearObsOperator::new(hm)?,
            b: bm,
            r: r.diagonal(&channels),
            rows,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn solve(&self) -> Result<Analysis, OracleError> {
        analysis_3dvar(&self.xb, &self.yo, &self.h, &self.b, &self.r)
    }

    pub fn gain(&self) -> Result<DMatrix<f64>, OracleError> {
        kalman_gain(&self.h, &self.b, &self.r)
    }

    /// The background with the window replaced by `x`.
    pub fn to_state<T: Scalar>(&self, background: &GridState<T>, x: &DVector<f64>) -> GridState<f64> {
        let mut out = background.cast::<f64>();
        for (n, v) in x.iter().enumerate() {
            let (c, i, j) = self.layout.decompose(n);
            out.fields.set3(c, self.window.row + i, self.window.col + j, *v);
        }
        out
    }
}
