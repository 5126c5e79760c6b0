//! Plain-slice kernels behind the graph ops.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self, DiffError> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("input must be [C,H,W], got {input:?}"),
                })
            }
        };
        let (c_out, kc, k) = match kernel {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            _ => {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("kernel must be [Co,C,k,k], got {kernel:?}"),
                })
            }
        };
        if kc != c_in {
            return Err(DiffError::Shape {
                op: "conv2d",
                detail: format!("kernel expects {kc} input channels, input has {c_in}"),
            });
        }
        let pad = if stride == 1 && k % 2 == 1 {
            (k - 1) / 2
        } else if stride == k && stride > 1 {
            if h % k != 0 || w % k != 0 {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("stride-{k} input extents {h}x{w} must be multiples of {k}"),
                });
            }
            0
        } else {
            return Err(DiffError::InvalidKernel { k, stride });
        };
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    // Input column for output column `ow` at kernel offset `kj`, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src(oh, ki, g.h) else {
                        continue;
                    };
                    let src = &plane[ih * g.w..(ih + 1) * g.w];
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if g.stride == 1 {
                        // Contiguous shifted copy with zero margins.
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.w_out as isize)).max(0) as usize;
                        for ow in lo..hi {
                            out_row[ow] = src[(ow as isize + shift) as usize];
                        }
                    } else {
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            *o = src[ow * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.out_len();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src(oh, ki, g.h) else {
                        continue;
                    };
                    let in_row = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let col_row = &src[oh * g.w_out..(oh + 1) * g.w_out];
                    if g.stride == 1 {
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.w_out as isize)).max(0) as usize;
                        for ow in lo..hi {
                            let iw = (ow as isize + shift) as usize;
                            in_row[iw] = in_row[iw] + col_row[ow];
                        }
                    } else {
                        for (ow, &c) in col_row.iter().enumerate() {
                            let iw = ow * g.stride + kj;
                            in_row[iw] = in_row[iw] + c;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns `(y, xhat, rstd)` for channel-wise normalization of `x: [c, n]`.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    c: usize,
    n: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::of(c as f64);
    let mut mean = vec![T::zero(); n];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_c);
    let mut var = vec![T::zero(); n];
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&x[ch * n..(ch + 1) * n]).zip(&mean) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    let rstd: Vec<T> = var.iter().map(|&s| (s * inv_c + eps).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); c * n];
    let mut y = vec![T::zero(); c * n];
    for ch in 0..c {
        let (g, b) = (gain[ch], bias[ch]);
        for p in 0..n {
            let xh = (x[ch * n + p] - mean[p]) * rstd[p];
            xhat[ch * n + p] = xh;
            y[ch * n + p] = g * xh + b;
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    c: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut sum_d = vec![T::zero(); n];
    let mut sum_dx = vec![T::zero(); n];
    for ch in 0..c {
        let g = gain[ch];
        for p in 0..n {
            let i = ch * n + p;
            dg[ch] = dg[ch] + dy[i] * xhat[i];
            db[ch] = db[ch] + dy[i];
            let dxh = dy[i] * g;
            sum_d[p] = sum_d[p] + dxh;
            sum_dx[p] = sum_dx[p] + dxh * xhat[i];
        }
    }
    let cf = T::of(c as f64);
    let mut dx = vec![T::zero(); c * n];
    for ch in 0..c {
        let g = gain[ch];
        for p in 0..n {
            let i = ch * n + p;
            dx[i] = rstd[p] / cf * (cf * dy[i] * g - sum_d[p] - xhat[i] * sum_dx[p]);
        }
    }
    (dx, dg, db)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, DiffError> {
    let (c, h, w) = x.chw()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(DiffError::IndivisibleChannels { channels: c, factor: r });
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); c * h * w];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                let src = x.plane(ic);
                for y in 0..h {
                    let dst_row = (oc * ho + y * r + i) * wo;
                    for xx in 0..w {
                        out[dst_row + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out)
}

/// Inverse rearrangement of [`pixel_shuffle`].
pub(crate) fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, DiffError> {
    let (co, ho, wo) = x.chw()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(DiffError::Shape {
            op: "pixel_unshuffle",
            detail: format!("{ho}x{wo} not divisible by {r}"),
        });
    }
    let (h, w) = (ho / r, wo / r);
    let c = co * r * r;
    let mut out = vec![T::zero(); c * h * w];
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let ic = oc * r * r + i * r + j;
                for y in 0..h {
                    let src_row = (oc * ho + y * r + i) * wo;
                    for xx in 0..w {
                        out[(ic * h + y) * w + xx] = x.data()[src_row + xx * r + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

// Corner-aligned sampling positions: (lower index, upper index, upper weight).
fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 2);
            (lo, lo + 1, src - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_resize<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, DiffError> {
    let (c, hi, wi) = x.chw()?;
    if h == 0 || w == 0 {
        return Err(DiffError::Shape {
            op: "bilinear_resize",
            detail: format!("target {h}x{w} must be at least 1x1"),
        });
    }
    if (h, w) == (hi, wi) {
        return Ok(x.clone());
    }
    let rows = interp_axis(hi, h);
    let cols = interp_axis(wi, w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let p = x.plane(ch);
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::of(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::of(fc);
                let top = p[r0 * wi + c0] + (p[r0 * wi + c1] - p[r0 * wi + c0]) * fc;
                let bot = p[r1 * wi + c0] + (p[r1 * wi + c1] - p[r1 * wi + c0]) * fc;
                out[(ch * h + i) * w + j] = top + (bot - top) * fr;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Adjoint of [`bilinear_resize`] from `dy: [C,h',w']` back to `[C,h,w]`.
pub(crate) fn bilinear_resize_adjoint<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, DiffError> {
    let (c, ho, wo) = dy.chw()?;
    if (ho, wo) == (h, w) {
        return Ok(dy.clone());
    }
    let rows = interp_axis(h, ho);
    let cols = interp_axis(w, wo);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = dy.plane(ch);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::of(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::of(fc);
                let d = g[i * wo + j];
                let (top, bot) = (d * (T::one() - fr), d * fr);
                dst[r0 * w + c0] = dst[r0 * w + c0] + top * (T::one() - fc);
                dst[r0 * w + c1] = dst[r0 * w + c1] + top * fc;
                dst[r1 * w + c0] = dst[r1 * w + c0] + bot * (T::one() - fc);
                dst[r1 * w + c1] = dst[r1 * w + c1] + bot * fc;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}
