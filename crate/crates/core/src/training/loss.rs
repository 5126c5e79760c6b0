use crate::diffcore::{Scalar, Tensor};
use crate::toyatm::lat_weights;

use super::TrainError;

/// `(1/(C·H·W)) Σ α_i |pred − truth|` with latitude weights `α_i = H·cos φ_i / Σ cos φ_j`.
pub fn weighted_l1<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, latitudes: &[f64]) -> Result<f64, TrainError> {
    if pred.shape() != truth.shape() {
        return Err(TrainError::Shape(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let (c, h, w) = pred.chw().map_err(|e| TrainError::Shape(e.to_string()))?;
    if latitudes.len() != h {
        return Err(TrainError::Shape(format!("{} latitudes for {h} rows", latitudes.len())));
    }
    let alpha = lat_weights(latitudes);
    let mut acc = 0.0;
    for ch in 0..c {
        for (i, a) in alpha.iter().enumerate() {
            let off = (ch * h + i) * w;
            let row: f64 = pred.data()[off..off + w]
                .iter()
                .zip(&truth.data()[off..off + w])
                .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
                .sum();
            acc += a * row;
        }
    }
    Ok(acc / (c * h * w) as f64)
}

/// Analysis loss plus the mean of the forecast losses.
pub fn total_loss(analysis: f64, rollout: &[f64]) -> f64 {
    if rollout.is_empty() {
        return analysis;
    }
    analysis + rollout.iter().sum::<f64>() / rollout.len() as f64
}
