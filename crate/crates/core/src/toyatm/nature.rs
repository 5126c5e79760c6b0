use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::exec::{self, Mode};

use super::{AtmError, GridSpec, GridState, ModelConfig, NoiseSpec, ToyModel};

/// Independent random streams derived from one seed.
pub fn sample_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub(crate) const DOMAIN_NATURE: u64 = 1;
pub(crate) const DOMAIN_BACKGROUND: u64 = 2;

/// How the truth trajectory and the backgrounds are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NatureConfig {
    /// Dynamics of the truth run; differs from the forecast model on purpose.
    pub truth: ModelConfig,
    /// Per-step relaxation of the truth toward climatology.
    pub relaxation: f64,
    /// Stochastic forcing added to the truth every step.
    pub forcing: NoiseSpec,
    /// Error statistics of the state the background forecast starts from.
    pub background: NoiseSpec,
    /// Multiplier on `background` (0 gives noiseless backgrounds).
    pub amplitude: f64,
    pub spinup: usize,
}

impl Default for NatureConfig {
    fn default() -> Self {
        Self {
            truth: ModelConfig::desk_truth(),
            relaxation: 0.1,
            forcing: NoiseSpec {
                std: vec![0.5, 0.5, 0.5, 0.5, 0.5, 2.0, 2.0, 2.0, 2.0, 2.0],
                length_scale: 4.0,
                vertical_corr: (-1.0f64).exp(),
            },
            background: NoiseSpec::desk_background(),
            amplitude: 1.0,
            spinup: 100,
        }
    }
}

impl NatureConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<(), AtmError> {
        self.truth.validate(grid)?;
        let c = grid.channels();
        if self.forcing.std.len() != c || self.background.std.len() != c {
            return Err(AtmError::Config(format!("noise specs need {c} channel deviations")));
        }
        if !(0.0..1.0).contains(&self.relaxation) || !(self.amplitude >= 0.0) {
            return Err(AtmError::Config(format!(
                "relaxation {} must be in [0,1) and amplitude {} non-negative",
                self.relaxation, self.amplitude
            )));
        }
        Ok(())
    }
}

/// Zonally symmetric reference state: warm moist tropics, cold dry poles.
pub fn climatology(grid: &GridSpec, reference_temperature: &[f64]) -> GridState<f64> {
    let l = grid.n_levels();
    let lats = grid.latitudes();
    let mut f = Tensor::zeros(&grid.shape());
    for (i, lat) in lats.iter().enumerate() {
        let c = lat.to_radians().cos();
        for k in 0..l {
            let t = reference_temperature[k] + 12.0 * (c - 0.64);
            let q = 15.0 + 45.0 * c * c;
            for j in 0..grid.w {
                f.set3(k, i, j, t);
                f.set3(l + k, i, j, q);
            }
        }
    }
    GridState { fields: f }
}

/// Truth trajectory plus one background per analysis time, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphereSet {
    /// `truth[t]` for t = 0..=count+horizon.
    pub truth: Vec<GridState<f32>>,
    /// `backgrounds[t-1]` is the background valid at time t, for t = 1..=count.
    pub backgrounds: Vec<GridState<f32>>,
}

impl AtmosphereSet {
    pub fn count(&self) -> usize {
        self.backgrounds.len()
    }

    pub fn background(&self, t: usize) -> &GridState<f32> {
        &self.backgrounds[t - 1]
    }
}

/// Runs the truth for `count + horizon` steps after spin-up and builds each background
/// as one forecast step from the perturbed previous truth. Deterministic for a seed,
/// whatever the execution mode.
pub fn generate_dataset(
    grid: &GridSpec,
    forecast: &ModelConfig,
    nature: &NatureConfig,
    count: usize,
    horizon: usize,
    seed: u64,
    mode: Mode,
) -> Result<AtmosphereSet, AtmError> {
    if count == 0 {
        return Err(AtmError::Config("sample count must be at least 1".into()));
    }
    nature.validate(grid)?;
    let fc = ToyModel::new(grid, forecast)?;
    let truth_model = ToyModel::new(grid, &nature.truth)?;
    let clim = climatology(grid, &nature.truth.reference_temperature);

    let mut state = clim.clone();
    let mut rng = sample_rng(seed, DOMAIN_NATURE, u64::MAX);
    state.fields.add_assign(&nature.forcing.scaled(3.0).sample(grid, &mut rng));
    state.clip_humidity();
    let total = nature.spinup + count + horizon + 1;
    let mut truth = Vec::with_capacity(count + horizon + 1);
    let mut full = Vec::with_capacity(count + 1);
    for n in 0..total {
        let mut next = truth_model.step(&state);
        let r = nature.relaxation;
        for (v, c) in next.fields.data_mut().iter_mut().zip(clim.fields.data()) {
            *v += r * (c - *v);
        }
        let mut rng = sample_rng(seed, DOMAIN_NATURE, n as u64);
        next.fields.add_assign(&nature.forcing.sample(grid, &mut rng));
        next.clip_humidity();
        state = next;
        if n >= nature.spinup {
            if full.len() <= count {
                full.push(state.clone());
            }
            truth.push(state.cast::<f32>());
        }
    }

    let noise = nature.background.scaled(nature.amplitude);
    let backgrounds = exec::map_range(mode, count, |s| {
        let mut start = full[s].clone();
        if nature.amplitude > 0.0 {
            let mut rng = sample_rng(seed, DOMAIN_BACKGROUND, s as u64);
            start.fields.add_assign(&noise.sample(grid, &mut rng));
            start.clip_humidity();
        }
        fc.step(&start).cast::<f32>()
    });
    Ok(AtmosphereSet { truth, backgrounds })
}
