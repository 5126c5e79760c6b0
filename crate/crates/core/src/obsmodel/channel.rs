use serde::{Deserialize, Serialize};

use super::ObsError;

/// One infrared channel with transmittance `τ(p) = exp(−(p/p_c)^γ)` and brightness
/// temperature sensitivity `a` to temperature and `−b` to humidity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: u8,
    /// Peak pressure `p_c` (hPa).
    pub peak_pressure: f64,
    /// Shape exponent `γ`.
    pub gamma: f64,
    pub t_gain: f64,
    pub q_gain: f64,
}

impl ChannelSpec {
    /// Three water-vapour-like channels peaking at 300, 500 and 700 hPa.
    pub fn desk_channels() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec { id: 9, peak_pressure: 300.0, gamma: 2.0, t_gain: 1.0, q_gain: 0.6 },
            ChannelSpec { id: 10, peak_pressure: 500.0, gamma: 2.0, t_gain: 1.0, q_gain: 0.5 },
            ChannelSpec { id: 11, peak_pressure: 700.0, gamma: 2.0, t_gain: 1.0, q_gain: 0.4 },
        ]
    }

    pub fn validate(&self, levels: &[f64]) -> Result<(), ObsError> {
        let (lo, hi) = (levels[0], levels[levels.len() - 1]);
        if !(self.gamma > 0.0) || !(lo..=hi).contains(&self.peak_pressure) || !(self.q_gain > 0.0) {
            return Err(ObsError::Channel(format!(
                "channel {}: need γ>0, b>0 and p_c within [{lo}, {hi}] hPa",
                self.id
            )));
        }
        Ok(())
    }

    pub fn transmittance(&self, p: f64) -> f64 {
        (-(p / self.peak_pressure).powf(self.gamma)).exp()
    }
}

/// Normalized per-level weighting function of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingFunction {
    pub channel_id: u8,
    pub weights: Vec<f64>,
}

impl WeightingFunction {
    pub fn peak_level(&self) -> usize {
        argmax(&self.weights)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Layer interfaces in log-pressure: midpoints between levels, the outer ones mirrored.
fn interfaces(levels: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = levels.iter().map(|p| p.ln()).collect();
    let n = s.len();
    let mut out = Vec::with_capacity(n + 1);
    out.push(s[0] - 0.5 * (s[1] - s[0]));
    for k in 0..n - 1 {
        out.push(0.5 * (s[k] + s[k + 1]));
    }
    out.push(s[n - 1] + 0.5 * (s[n - 1] - s[n - 2]));
    out
}

/// Discrete `|Δτ / Δln p|` over the log-pressure layer around each level, normalized
/// to unit sum.
pub fn weighting_function(channel: &ChannelSpec, levels: &[f64]) -> Result<WeightingFunction, ObsError> {
    if levels.len() < 2 {
        return Err(ObsError::Levels(format!("need at least 2 levels, got {}", levels.len())));
    }
    if levels.iter().any(|p| !(*p > 0.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ObsError::Levels(format!("levels {levels:?} must be positive and strictly increasing")));
    }
    let edges = interfaces(levels);
    let raw: Vec<f64> = edges
        .windows(2)
        .map(|e| {
            let (top, bottom) = (e[0].exp(), e[1].exp());
            (channel.transmittance(top) - channel.transmittance(bottom)).abs() / (e[1] - e[0])
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(ObsError::Channel(format!(
            "channel {} has no sensitivity across the level range",
            channel.id
        )));
    }
    Ok(WeightingFunction {
        channel_id: channel.id,
        weights: raw.iter().map(|v| v / total).collect(),
    })
}

/// Sky condition of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sky {
    Clear,
    /// Opaque cloud with its top at this level index.
    Cloudy { top: usize },
}

/// `1 − 0.1·(1 − cos θ)`.
pub fn limb_factor(zenith_deg: f64) -> f64 {
    1.0 - 0.1 * (1.0 - zenith_deg.to_radians().cos())
}

/// Brightness-temperature simulator for a fixed channel set and level stack.
#[derive(Debug, Clone)]
pub struct Radiometer {
    channels: Vec<ChannelSpec>,
    wfs: Vec<WeightingFunction>,
    levels: Vec<f64>,
}

impl Radiometer {
    pub fn new(channels: &[ChannelSpec], levels: &[f64]) -> Result<Self, ObsError> {
        let wfs = channels
            .iter()
            .map(|c| {
                c.validate(levels)?;
                weighting_function(c, levels)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            channels: channels.to_vec(),
            wfs,
            levels: levels.to_vec(),
        })
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn weighting(&self, k: usize) -> &WeightingFunction {
        &self.wfs[k]
    }

    pub fn channel_index(&self, id: u8) -> Option<usize> {
        self.channels.iter().position(|c| c.id == id)
    }

    fn effective_weights(&self, k: usize, sky: Sky) -> Vec<f64> {
        let mut w = self.wfs[k].weights.clone();
        if let Sky::Cloudy { top } = sky {
            let top = top.min(w.len() - 1);
            let below: f64 = w[top..].iter().sum();
            w[top..].iter_mut().for_each(|x| *x = 0.0);
            w[top] = below;
        }
        w
    }

    /// Brightness temperature of channel `k` for a column `(T, Q)` given top level first.
    pub fn simulate_bt(&self, t: &[f64], q: &[f64], k: usize, zenith_deg: f64, sky: Sky) -> f64 {
        let ch = &self.channels[k];
        let w = self.effective_weights(k, sky);
        let sum: f64 = w
            .iter()
            .zip(t.iter().zip(q))
            .map(|(wl, (tl, ql))| wl * (ch.t_gain * tl - ch.q_gain * ql))
            .sum();
        sum * limb_factor(zenith_deg)
    }

    /// Clear-sky `(∂BT/∂T_l, ∂BT/∂Q_l)` for channel `k`. The operator is linear in the
    /// column, so the result does not depend on the column values.
    pub fn jacobian_bt(&self, k: usize, zenith_deg: f64) -> (Vec<f64>, Vec<f64>) {
        let ch = &self.channels[k];
        let limb = limb_factor(zenith_deg);
        let w = &self.wfs[k].weights;
        (
            w.iter().map(|x| ch.t_gain * x * limb).collect(),
            w.iter().map(|x| -ch.q_gain * x * limb).collect(),
        )
    }
}
