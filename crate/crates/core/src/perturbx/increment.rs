use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::danet::DaNet;
use crate::obsmodel::{Crop, Radiometer, SuperObsGrid};
use crate::toyatm::{GridSpec, GridState};
use crate::varoracle::{kalman_gain, single_obs_increment, CovarianceB, CovarianceR, LinearObsOperator, OracleProblem};

use super::PerturbError;

/// Frame of the observation window the perturbed super-observation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPos {
    Beginning,
    Middle,
    End,
}

impl WindowPos {
    pub fn frame(self, frames: usize) -> usize {
        match self {
            WindowPos::Beginning => 0,
            WindowPos::Middle => frames / 2,
            WindowPos::End => frames - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkyKind {
    Clear,
    Cloudy,
}

/// One brightness-temperature perturbation at a grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub channel: u8,
    /// Added brightness temperature (K).
    pub magnitude: f64,
    pub window: WindowPos,
    pub sky: SkyKind,
}

/// Copy of `obs` with the spec's perturbation applied, after checking that the target
/// exists, is valid and has the declared sky condition.
pub fn perturb_obs(obs: &SuperObsGrid, radiometer: &Radiometer, spec: &PerturbSpec) -> Result<SuperObsGrid, PerturbError> {
    if !spec.magnitude.is_finite() {
        return Err(PerturbError::Spec(format!("{}: magnitude {} is not finite", spec.id, spec.magnitude)));
    }
    let k = radiometer
        .channel_index(spec.channel)
        .ok_or_else(|| PerturbError::Spec(format!("{}: unknown channel {}", spec.id, spec.channel)))?;
    let c = obs.crop;
    if !c.contains(spec.row, spec.col) {
        return Err(PerturbError::Spec(format!("{}: cell ({}, {}) outside {c:?}", spec.id, spec.row, spec.col)));
    }
    let (i, j) = (spec.row - c.row, spec.col - c.col);
    let frame = spec.window.frame(obs.frames);
    if !obs.is_valid(frame, i, j) {
        return Err(PerturbError::Masked { row: spec.row, col: spec.col, frame });
    }
    let cloudy = obs.cloud.at3(frame, i, j) > 0.0;
    if cloudy != (spec.sky == SkyKind::Cloudy) {
        return Err(PerturbError::Spec(format!("{}: target sky is {}", spec.id, if cloudy { "cloudy" } else { "clear" })));
    }
    let mut out = obs.clone();
    let ch = frame * obs.channels + k;
    let v = out.bt.at3(ch, i, j);
    out.bt.set3(ch, i, j, (v as f64 + spec.magnitude) as f32);
    Ok(out)
}

/// `forward(background, obs + Δ) − forward(background, obs)`.
pub fn perturbed_increment(
    net: &DaNet<f32>,
    background: &GridState<f32>,
    obs: &SuperObsGrid,
    radiometer: &Radiometer,
    spec: &PerturbSpec,
) -> Result<GridState<f64>, PerturbError> {
    let moved = perturb_obs(obs, radiometer, spec)?;
    let base = net.forward(background, Some(obs))?;
    let pert = net.forward(background, Some(&moved))?;
    let fields = pert
        .fields
        .zip_map(&base.fields, |a, b| a - b)
        .map_err(crate::danet::NetError::from)?
        .cast::<f64>();
    Ok(GridState { fields })
}

/// Which observations enter the oracle's Kalman gain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    /// Only the perturbed super-observation: `K = BHᵀ/(HBHᵀ + r)` with H a single row.
    /// Sign, antisymmetry, vertical placement and locality then follow from B and the
    /// Jacobian alone.
    #[default]
    SingleObservation,
    /// Every unmasked super-observation in the window. Neighbouring channels at the same
    /// column can pull the increment away from the single-channel pattern.
    FullWindow,
}

/// Ingredients of the variational reference on a square window around each target.
#[derive(Debug, Clone)]
pub struct OracleSetup<'a> {
    pub grid: &'a GridSpec,
    pub radiometer: &'a Radiometer,
    pub b: &'a CovarianceB,
    pub r: &'a CovarianceR,
    /// Window side in cells.
    pub window: usize,
    pub gain: GainKind,
}

impl OracleSetup<'_> {
    /// Square window of side `window` centred on the target and clamped into `crop`.
    pub fn window_around(&self, crop: Crop, row: usize, col: usize) -> Crop {
        let n = self.window.min(crop.h).min(crop.w).max(1);
        let place = |x: usize, lo: usize, len: usize| x.saturating_sub(n / 2).clamp(lo, lo + len - n);
        Crop { row: place(row, crop.row, crop.h), col: place(col, crop.col, crop.w), h: n, w: n }
    }
}

/// `K·Δy` for the spec's single super-observation, embedded in a zero state. A cloudy
/// target is screened out of the analysis, so its increment is zero.
pub fn oracle_increment(
    setup: &OracleSetup<'_>,
    background: &GridState<f32>,
    obs: &SuperObsGrid,
    spec: &PerturbSpec,
) -> Result<GridState<f64>, PerturbError> {
    perturb_obs(obs, setup.radiometer, spec)?;
    let k = setup.radiometer.channel_index(spec.channel).expect("checked by perturb_obs");
    let frame = spec.window.frame(obs.frames);
    let window = setup.window_around(obs.crop, spec.row, spec.col);
    let problem = OracleProblem::build(setup.grid, background, obs, setup.radiometer, setup.b, setup.r, window)?;
    let mut out = GridState::<f64>::zeros(setup.grid);
    let Some(idx) = problem
        .rows
        .iter()
        .position(|o| (o.frame, o.channel, o.row, o.col) == (frame, k, spec.row, spec.col))
    else {
        return Ok(out);
    };
    let dx = match setup.gain {
        GainKind::SingleObservation => {
            let h = LinearObsOperator::new(problem.h.matrix.rows(idx, 1).into_owned())?;
            let r = DVector::from_element(1, problem.r[idx]);
            let gain = kalman_gain(&h, &problem.b, &r)?;
            single_obs_increment(&gain, &DVector::from_element(1, spec.magnitude))
        }
        GainKind::FullWindow => {
            let mut dy = DVector::zeros(problem.n_obs());
            dy[idx] = spec.magnitude;
            single_obs_increment(&problem.gain()?, &dy)
        }
    };
    for (n, v) in dx.iter().enumerate() {
        let (c, i, j) = problem.layout.decompose(n);
        out.fields.set3(c, window.row + i, window.col + j, *v);
    }
    Ok(out)
}
