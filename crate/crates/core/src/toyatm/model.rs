use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffFunction, Scalar, Tensor};

use super::{AtmError, GridSpec, GridState};

/// Humidity adjustment target is `100·sigmoid((T − T_ref)/SATURATION_WIDTH)`.
const SATURATION_WIDTH: f64 = 8.0;
/// Temperature change (K) per percent of humidity adjusted.
const LATENT_FACTOR: f64 = 0.05;

/// Parameters of one 6-hour step of the toy dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Zonal wind per level, grid cells per step (positive eastward).
    pub winds: Vec<f64>,
    /// Explicit diffusion coefficient per step.
    pub diffusion: f64,
    /// Relaxation rate of humidity toward its temperature-dependent target.
    pub coupling: f64,
    /// Reference temperature per level for the humidity target (K).
    pub reference_temperature: Vec<f64>,
    /// Constant per-channel tendency added every step.
    pub source: Vec<f64>,
    pub seed: u64,
}

impl ModelConfig {
    /// Forecast-model defaults for the 5-level desk grid, with a cold and dry drift.
    pub fn desk_forecast() -> Self {
        Self {
            winds: vec![1.5, 1.2, 0.8, 0.5, 0.3],
            diffusion: 0.04,
            coupling: 0.04,
            reference_temperature: vec![222.0, 236.0, 256.0, 270.0, 278.0],
            source: vec![-0.4, -0.3, -0.2, -0.3, -0.4, -1.5, -2.0, -2.5, -2.0, -1.5],
            seed: 7,
        }
    }

    /// Truth ("nature") dynamics: the forecast model plus heating/moistening it lacks.
    pub fn desk_truth() -> Self {
        Self {
            coupling: 0.06,
            source: vec![0.2, 0.35, 0.45, 0.35, 0.2, 0.8, 1.2, 1.6, 1.2, 0.8],
            ..Self::desk_forecast()
        }
    }

    /// Zero wind, diffusion, coupling and source.
    pub fn identity(levels: usize) -> Self {
        Self {
            winds: vec![0.0; levels],
            diffusion: 0.0,
            coupling: 0.0,
            reference_temperature: vec![250.0; levels],
            source: vec![0.0; 2 * levels],
            seed: 0,
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), AtmError> {
        let l = grid.n_levels();
        if self.winds.len() != l || self.reference_temperature.len() != l || self.source.len() != 2 * l {
            return Err(AtmError::Config(format!(
                "per-level vectors must have {l} entries and source {} entries",
                2 * l
            )));
        }
        if !(0.0..=0.25).contains(&self.diffusion) {
            return Err(AtmError::Config(format!("diffusion {} outside [0, 0.25]", self.diffusion)));
        }
        let max_wind = grid.w as f64 / 4.0;
        if let Some(u) = self.winds.iter().find(|u| !u.is_finite() || u.abs() > max_wind) {
            return Err(AtmError::Config(format!("wind {u} exceeds W/4 = {max_wind}")));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(AtmError::Config(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if self.source.iter().chain(&self.reference_temperature).any(|v| !v.is_finite()) {
            return Err(AtmError::Config("non-finite source or reference temperature".into()));
        }
        Ok(())
    }
}

/// A validated model bound to its grid; usable as a differentiable map.
#[derive(Debug, Clone)]
pub struct ToyModel {
    grid: GridSpec,
    config: ModelConfig,
}

impl ToyModel {
    pub fn new(grid: &GridSpec, config: &ModelConfig) -> Result<Self, AtmError> {
        grid.validate()?;
        config.validate(grid)?;
        Ok(Self {
            grid: grid.clone(),
            config: config.clone(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step<T: Scalar>(&self, state: &GridState<T>) -> GridState<T> {
        GridState {
            fields: self.forward_fields(&state.fields),
        }
    }

    /// States after 1, 2, ..., `steps` applications of [`ToyModel::step`].
    pub fn rollout<T: Scalar>(&self, state: &GridState<T>, steps: usize) -> Vec<GridState<T>> {
        let mut out: Vec<GridState<T>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = self.step(out.last().unwrap_or(state));
            out.push(next);
        }
        out
    }

    fn forward_fields<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.stages(x);
        s.clipped
    }

    fn stages<T: Scalar>(&self, x: &Tensor<T>) -> Stages<T> {
        let (c, h, w) = (self.grid.channels(), self.grid.h, self.grid.w);
        let l = self.grid.n_levels();
        let mut adv = x.clone();
        for ch in 0..c {
            let wind = self.config.winds[ch % l];
            advect(x.plane(ch), adv.plane_mut(ch), h, w, wind);
        }
        let mut diff = adv.clone();
        for ch in 0..c {
            diffuse(adv.plane(ch), diff.plane_mut(ch), h, w, T::of(self.config.diffusion));
        }
        let mut coupled = diff.clone();
        if self.config.coupling != 0.0 {
            let cp = T::of(self.config.coupling);
            let lat = T::of(LATENT_FACTOR);
            for k in 0..l {
                let tref = T::of(self.config.reference_temperature[k]);
                for p in 0..h * w {
                    let (t, q) = (diff.plane(k)[p], diff.plane(l + k)[p]);
                    let qs = saturation(t, tref);
                    coupled.plane_mut(k)[p] = t + cp * lat * (q - qs);
                    coupled.plane_mut(l + k)[p] = q + cp * (qs - q);
                }
            }
        }
        let mut clipped = coupled.clone();
        for ch in 0..c {
            let src = T::of(self.config.source[ch]);
            let plane = clipped.plane_mut(ch);
            if src != T::zero() {
                plane.iter_mut().for_each(|v| *v = *v + src);
            }
            if ch >= l {
                let hundred = T::of(100.0);
                plane.iter_mut().for_each(|v| *v = v.max(T::zero()).min(hundred));
            }
        }
        Stages { diff, coupled, clipped }
    }

    /// `dyᵀ ∂step/∂x` at `x` (the adjoint model).
    pub fn adjoint<T: Scalar>(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = (self.grid.channels(), self.grid.h, self.grid.w);
        let l = self.grid.n_levels();
        let s = self.stages(x);
        // Clip: pass where the pre-clip humidity is in range.
        let mut g = dy.clone();
        let hundred = T::of(100.0);
        for ch in l..c {
            let pre = s.coupled.plane(ch);
            let src = T::of(self.config.source[ch]);
            for (gv, &v) in g.plane_mut(ch).iter_mut().zip(pre) {
                let v = v + src;
                if v < T::zero() || v > hundred {
                    *gv = T::zero();
                }
            }
        }
        // Coupling.
        if self.config.coupling != 0.0 {
            let cp = T::of(self.config.coupling);
            let lat = T::of(LATENT_FACTOR);
            let width = T::of(SATURATION_WIDTH);
            let mut gc = g.clone();
            for k in 0..l {
                let tref = T::of(self.config.reference_temperature[k]);
                for p in 0..h * w {
                    let t = s.diff.plane(k)[p];
                    let sg = crate::diffcore::kernels::sigmoid((t - tref) / width);
                    let dqs = hundred * sg * (T::one() - sg) / width;
                    let (gt, gq) = (g.plane(k)[p], g.plane(l + k)[p]);
                    gc.plane_mut(k)[p] = gt * (T::one() - cp * lat * dqs) + gq * cp * dqs;
                    gc.plane_mut(l + k)[p] = gt * cp * lat + gq * (T::one() - cp);
                }
            }
            g = gc;
        }
        // Diffusion is self-adjoint.
        let mut gd = g.clone();
        for ch in 0..c {
            diffuse(g.plane(ch), gd.plane_mut(ch), h, w, T::of(self.config.diffusion));
        }
        let mut gx = Tensor::zeros(x.shape());
        for ch in 0..c {
            advect_adjoint(gd.plane(ch), gx.plane_mut(ch), h, w, self.config.winds[ch % l]);
        }
        gx
    }
}

struct Stages<T: Scalar> {
    diff: Tensor<T>,
    coupled: Tensor<T>,
    clipped: Tensor<T>,
}

impl<T: Scalar> DiffFunction<T> for ToyModel {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_fields(x)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.adjoint(x, dy)
    }
}

fn saturation<T: Scalar>(t: T, tref: T) -> T {
    T::of(100.0) * crate::diffcore::kernels::sigmoid((t - tref) / T::of(SATURATION_WIDTH))
}

// out[j] = (1-f)·x[j-s] + f·x[j-s-1] with s = floor(u), f = u - s: first-order upwind
// in flux form, an exact circular shift for integer winds.
fn shift_weights(wind: f64) -> (isize, f64) {
    let s = wind.floor();
    (s as isize, wind - s)
}

fn advect<T: Scalar>(x: &[T], out: &mut [T], h: usize, w: usize, wind: f64) {
    let (s, f) = shift_weights(wind);
    let (a, b) = (T::of(1.0 - f), T::of(f));
    let wi = w as isize;
    for i in 0..h {
        let row = &x[i * w..(i + 1) * w];
        let dst = &mut out[i * w..(i + 1) * w];
        for (j, d) in dst.iter_mut().enumerate() {
            let j0 = (j as isize - s).rem_euclid(wi) as usize;
            let j1 = (j as isize - s - 1).rem_euclid(wi) as usize;
            *d = if f == 0.0 { row[j0] } else { a * row[j0] + b * row[j1] };
        }
    }
}

fn advect_adjoint<T: Scalar>(g: &[T], out: &mut [T], h: usize, w: usize, wind: f64) {
    let (s, f) = shift_weights(wind);
    let (a, b) = (T::of(1.0 - f), T::of(f));
    let wi = w as isize;
    for i in 0..h {
        let src = &g[i * w..(i + 1) * w];
        let dst = &mut out[i * w..(i + 1) * w];
        for (j, &gv) in src.iter().enumerate() {
            let j0 = (j as isize - s).rem_euclid(wi) as usize;
            let j1 = (j as isize - s - 1).rem_euclid(wi) as usize;
            if f == 0.0 {
                dst[j0] = dst[j0] + gv;
            } else {
                dst[j0] = dst[j0] + a * gv;
                dst[j1] = dst[j1] + b * gv;
            }
        }
    }
}

// Five-point diffusion, periodic in longitude, zero flux across the poles.
fn diffuse<T: Scalar>(x: &[T], out: &mut [T], h: usize, w: usize, k: T) {
    if k == T::zero() {
        out.copy_from_slice(x);
        return;
    }
    for i in 0..h {
        let up = if i + 1 < h { i + 1 } else { i };
        let dn = if i > 0 { i - 1 } else { i };
        for j in 0..w {
            let e = if j + 1 < w { j + 1 } else { 0 };
            let wv = if j > 0 { j - 1 } else { w - 1 };
            let c = x[i * w + j];
            let lap = x[i * w + e] + x[i * w + wv] + x[up * w + j] + x[dn * w + j] - T::of(4.0) * c;
            out[i * w + j] = c + k * lap;
        }
    }
}
