use std::io::Write;
use std::path::Path;

use crate::diffcore::{Scalar, Tensor};
use crate::obsmodel::Crop;

use super::EvalError;

fn check<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, lats: &[f64], channel: usize) -> Result<(usize, usize), EvalError> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let (c, h, w) = pred.chw().map_err(|e| EvalError::Shape(e.to_string()))?;
    if lats.len() != h || channel >= c {
        return Err(EvalError::Shape(format!("{} latitudes, channel {channel} for {c}x{h}x{w}", lats.len())));
    }
    Ok((h, w))
}

/// Latitude-weighted sum of squared errors over a box, with weights renormalized
/// over the box rows: `Σ ᾱ_i (pred − truth)²`.
fn weighted_sse<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, lats: &[f64], channel: usize, b: Crop) -> f64 {
    let rows = &lats[b.row..b.row + b.h];
    let cos_sum: f64 = rows.iter().map(|l| l.to_radians().cos()).sum();
    let mut acc = 0.0;
    for (k, lat) in rows.iter().enumerate() {
        let alpha = b.h as f64 * lat.to_radians().cos() / cos_sum;
        let i = b.row + k;
        let row: f64 = (b.col..b.col + b.w)
            .map(|j| {
                let d = pred.at3(channel, i, j).as_f64() - truth.at3(channel, i, j).as_f64();
                d * d
            })
            .sum();
        acc += alpha * row;
    }
    acc
}

/// `sqrt((1/(H·W)) Σ α_i (pred − truth)²)` for one channel.
pub fn rmse<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, lats: &[f64], channel: usize) -> Result<f64, EvalError> {
    let (h, w) = check(pred, truth, lats, channel)?;
    let full = Crop { row: 0, col: 0, h, w };
    Ok((weighted_sse(pred, truth, lats, channel, full) / (h * w) as f64).sqrt())
}

/// RMSE over an index box with latitude weights renormalized over the box rows.
pub fn regional_rmse<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    region: Crop,
    lats: &[f64],
    channel: usize,
) -> Result<f64, EvalError> {
    let (h, w) = check(pred, truth, lats, channel)?;
    if region.h == 0 || region.w == 0 || region.row + region.h > h || region.col + region.w > w {
        return Err(EvalError::Region(format!("{region:?} on a {h}x{w} grid")));
    }
    Ok((weighted_sse(pred, truth, lats, channel, region) / region.cells() as f64).sqrt())
}

/// `(a − b) / b`.
pub fn normalized_diff(a: f64, b: f64) -> Result<f64, EvalError> {
    if b == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    Ok((a - b) / b)
}

/// Regional RMSE on non-overlapping `rows × cols` blocks; result `[H/rows, W/cols]`.
pub fn rmse_map<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    block: (usize, usize),
    lats: &[f64],
    channel: usize,
) -> Result<Tensor<f64>, EvalError> {
    let (h, w) = check(pred, truth, lats, channel)?;
    let (br, bc) = block;
    if br == 0 || bc == 0 || h % br != 0 || w % bc != 0 {
        return Err(EvalError::Region(format!("block {br}x{bc} does not tile {h}x{w}")));
    }
    let (nr, nc) = (h / br, w / bc);
    let mut out = Tensor::zeros(&[nr, nc]);
    for bi in 0..nr {
        for bj in 0..nc {
            let b = Crop { row: bi * br, col: bj * bc, h: br, w: bc };
            out.data_mut()[bi * nc + bj] = (weighted_sse(pred, truth, lats, channel, b) / b.cells() as f64).sqrt();
        }
    }
    Ok(out)
}

/// Per-block latitude-weighted mean of a `[H, W]` field (e.g. mean squared errors),
/// with the same weighting as [`rmse_map`].
pub fn block_mean(field: &[f64], h: usize, w: usize, block: (usize, usize), lats: &[f64]) -> Result<Tensor<f64>, EvalError> {
    let (br, bc) = block;
    if field.len() != h * w || lats.len() != h || br == 0 || bc == 0 || h % br != 0 || w % bc != 0 {
        return Err(EvalError::Region(format!("block {br}x{bc} on a {h}x{w} field of {} values", field.len())));
    }
    let (nr, nc) = (h / br, w / bc);
    let mut out = Tensor::zeros(&[nr, nc]);
    for bi in 0..nr {
        let rows = &lats[bi * br..(bi + 1) * br];
        let cos_sum: f64 = rows.iter().map(|l| l.to_radians().cos()).sum();
        for bj in 0..nc {
            let mut acc = 0.0;
            for (k, lat) in rows.iter().enumerate() {
                let alpha = br as f64 * lat.to_radians().cos() / cos_sum;
                let i = bi * br + k;
                acc += alpha * field[i * w + bj * bc..i * w + (bj + 1) * bc].iter().sum::<f64>();
            }
            out.data_mut()[bi * nc + bj] = acc / (br * bc) as f64;
        }
    }
    Ok(out)
}

/// Binary 8-bit graymap of a `[rows, cols]` map, linearly scaled so `max` is white.
pub fn write_pgm(path: &Path, map: &Tensor<f64>, max: f64) -> Result<(), EvalError> {
    let [rows, cols] = map.shape() else {
        return Err(EvalError::Shape(format!("graymap needs rank 2, got {:?}", map.shape())));
    };
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8));
    std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(io)
}
