use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::GridSpec;

/// Statistics of spatially and vertically correlated Gaussian perturbations.
///
/// Horizontal correlation is `exp(-d²/(2·L²))` with `d` in grid cells (periodic in
/// longitude); vertical correlation between levels `k` and `m` is `ρ^|k−m|`.
/// Temperature and humidity are uncorrelated with each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation per state channel.
    pub std: Vec<f64>,
    pub length_scale: f64,
    pub vertical_corr: f64,
}

impl NoiseSpec {
    /// Background-error statistics used by the desk data generator.
    pub fn desk_background() -> Self {
        Self {
            std: vec![1.0, 1.0, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 4.0, 4.0],
            length_scale: 4.0,
            vertical_corr: (-1.0f64).exp(),
        }
    }

    pub fn scaled(&self, amplitude: f64) -> Self {
        Self {
            std: self.std.iter().map(|s| s * amplitude).collect(),
            ..self.clone()
        }
    }

    /// Unit-variance horizontally correlated field `[h, w]`.
    pub fn smooth_plane<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
        let white: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        smooth(&white, h, w, self.length_scale)
    }

    /// Draws one perturbation `[2L, H, W]`.
    pub fn sample<R: Rng>(&self, grid: &GridSpec, rng: &mut R) -> Tensor<f64> {
        let (h, w, l) = (grid.h, grid.w, grid.n_levels());
        let rho = self.vertical_corr;
        let innov = (1.0 - rho * rho).sqrt();
        let mut out = Tensor::zeros(&grid.shape());
        for block in 0..2 {
            let mut prev: Option<Vec<f64>> = None;
            for k in 0..l {
                let z = self.smooth_plane(h, w, rng);
                let e: Vec<f64> = match &prev {
                    None => z,
                    Some(p) => p.iter().zip(&z).map(|(a, b)| rho * a + innov * b).collect(),
                };
                let ch = block * l + k;
                let s = self.std[ch];
                for (dst, &v) in out.plane_mut(ch).iter_mut().zip(&e) {
                    *dst = s * v;
                }
                prev = Some(e);
            }
        }
        out
    }
}

// Kernel exp(-d²/L²) so that the smoothed field has correlation exp(-d²/(2L²)).
fn kernel(length: f64) -> Vec<f64> {
    if length <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * length).ceil() as isize;
    (-r..=r).map(|d| (-(d * d) as f64 / (length * length)).exp()).collect()
}

fn smooth(x: &[f64], h: usize, w: usize, length: f64) -> Vec<f64> {
    let k = kernel(length);
    let r = (k.len() / 2) as isize;
    let knorm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (o, kv) in k.iter().enumerate() {
                let jj = (j as isize + o as isize - r).rem_euclid(w as isize) as usize;
                acc += kv * x[i * w + jj];
            }
            rows[i * w + j] = acc / knorm;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let mut norm = 0.0;
        let mut taps = Vec::new();
        for (o, kv) in k.iter().enumerate() {
            let ii = i as isize + o as isize - r;
            if ii >= 0 && (ii as usize) < h {
                norm += kv * kv;
                taps.push((ii as usize, *kv));
            }
        }
        let norm = norm.sqrt();
        for j in 0..w {
            out[i * w + j] = taps.iter().map(|&(ii, kv)| kv * rows[ii * w + j]).sum::<f64>() / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smoothed_field_has_unit_variance_and_gaussian_correlation() {
        let spec = NoiseSpec::desk_background();
        let (h, w) = (64, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut var, mut c4, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..20 {
            let f = spec.smooth_plane(h, w, &mut rng);
            for i in 16..48 {
                for j in 0..w {
                    let v = f[i * w + j];
                    var += v * v;
                    c4 += v * f[i * w + (j + 4) % w];
                    n += 1.0;
                }
            }
        }
        let (var, corr) = (var / n, c4 / var);
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
        let want = (-16.0f64 / 32.0).exp();
        assert!((corr - want).abs() < 0.08, "corr {corr} vs {want}");
    }
}
