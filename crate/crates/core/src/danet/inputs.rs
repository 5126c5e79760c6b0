use serde::{Deserialize, Serialize};

use crate::diffcore::{ops, Scalar, Tensor};
use crate::obsmodel::{SuperObsGrid, AUX_PLANES};
use crate::toyatm::GridState;

use super::{NetConfig, NetError};

/// Per-channel input scaling; stored with the network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub bg_mean: Vec<f64>,
    pub bg_std: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize, obs_channels: usize) -> Self {
        Self {
            bg_mean: vec![0.0; channels],
            bg_std: vec![1.0; channels],
            obs_mean: vec![0.0; obs_channels],
            obs_std: vec![1.0; obs_channels],
        }
    }

    /// Statistics over a set of backgrounds and the valid cells of their observations.
    pub fn fit<T: Scalar>(backgrounds: &[&GridState<T>], obs: &[&SuperObsGrid]) -> Self {
        let c = backgrounds.first().map_or(0, |b| b.fields.shape()[0]);
        let mut bg_mean = vec![0.0; c];
        let mut bg_std = vec![0.0; c];
        for ch in 0..c {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for b in backgrounds {
                for v in b.fields.plane(ch) {
                    let v = v.as_f64();
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            bg_mean[ch] = s / n;
            bg_std[ch] = (s2 / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-6);
        }
        let k = obs.first().map_or(0, |o| o.channels);
        let mut obs_mean = vec![0.0; k];
        let mut obs_std = vec![1.0; k];
        for ch in 0..k {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for o in obs {
                for f in 0..o.frames {
                    for i in 0..o.crop.h {
                        for j in 0..o.crop.w {
                            if o.is_valid(f, i, j) {
                                let v = o.bt_at(f, ch, i, j) as f64;
                                s += v;
                                s2 += v * v;
                                n += 1.0;
                            }
                        }
                    }
                }
            }
            if n > 0.0 {
                obs_mean[ch] = s / n;
                obs_std[ch] = (s2 / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-6);
            }
        }
        Self { bg_mean, bg_std, obs_mean, obs_std }
    }
}

/// Network-ready tensors for one sample.
#[derive(Debug, Clone)]
pub struct NetInputs<T: Scalar> {
    /// Physical background on the full grid.
    pub background: Tensor<T>,
    /// Normalized background on the full grid.
    pub bg_norm: Tensor<T>,
    /// Normalized background on the working extent.
    pub bg_work: Tensor<T>,
    /// `[frames·(K+7), h, w]` normalized, masked BT planes and encodings per frame.
    pub obs: Option<Tensor<T>>,
    /// Background crop concatenated with `obs`.
    pub mixed: Option<Tensor<T>>,
}

pub(crate) fn assemble<T: Scalar>(
    cfg: &NetConfig,
    norm: &Normalization,
    background: &GridState<T>,
    obs: Option<&SuperObsGrid>,
) -> Result<NetInputs<T>, NetError> {
    let shape = background.fields.shape();
    if shape != [cfg.channels, cfg.h, cfg.w] {
        return Err(NetError::Input(format!(
            "background shape {shape:?}, expected [{}, {}, {}]",
            cfg.channels, cfg.h, cfg.w
        )));
    }
    let mean: Vec<T> = norm.bg_mean.iter().map(|&v| T::of(v)).collect();
    let inv: Vec<T> = norm.bg_std.iter().map(|&v| T::of(1.0 / v)).collect();
    let mut bg_norm = background.fields.clone();
    for ch in 0..cfg.channels {
        let (m, s) = (mean[ch], inv[ch]);
        bg_norm.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    let (wh, ww) = cfg.work_extent();
    let bg_work = if (wh, ww) == (cfg.h, cfg.w) {
        bg_norm.clone()
    } else {
        ops::bilinear_resize(&bg_norm, wh, ww)?
    };
    let (obs_t, mixed) = match obs {
        None => (None, None),
        Some(o) => {
            if o.crop != cfg.crop || o.frames != cfg.frames || o.channels != cfg.obs_channels {
                return Err(NetError::Input(format!(
                    "observations on {:?} with {} frames x {} channels, expected {:?} with {} x {}",
                    o.crop, o.frames, o.channels, cfg.crop, cfg.frames, cfg.obs_channels
                )));
            }
            let (h, w) = (o.crop.h, o.crop.w);
            let per = cfg.obs_channels + AUX_PLANES;
            let mut t = Tensor::zeros(&[cfg.frames * per, h, w]);
            for f in 0..cfg.frames {
                for k in 0..cfg.obs_channels {
                    let (m, s) = (norm.obs_mean[k], norm.obs_std[k]);
                    let plane = t.plane_mut(f * per + k);
                    for i in 0..h {
                        for j in 0..w {
                            if o.is_valid(f, i, j) {
                                plane[i * w + j] = T::of((o.bt_at(f, k, i, j) as f64 - m) / s);
                            }
                        }
                    }
                }
                for e in 0..AUX_PLANES {
                    let src = o.aux.plane(f * AUX_PLANES + e);
                    for (d, &s) in t.plane_mut(f * per + cfg.obs_channels + e).iter_mut().zip(src) {
                        *d = T::of(s as f64);
                    }
                }
            }
            let c = cfg.crop;
            let crop = bg_work.crop(c.row, c.col, c.h, c.w)?;
            let mixed = Tensor::concat_channels(&[&crop, &t])?;
            (Some(t), Some(mixed))
        }
    };
    Ok(NetInputs {
        background: background.fields.clone(),
        bg_norm,
        bg_work,
        obs: obs_t,
        mixed,
    })
}
