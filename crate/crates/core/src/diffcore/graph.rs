use std::sync::Arc;

use super::param::{GradSet, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{kernels, DiffError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A differentiable map supplied from outside this module (e.g. a dynamical model step).
pub trait DiffFunction<T: Scalar>: Send + Sync {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;
    /// Vector-Jacobian product `dyᵀ ∂f/∂x` evaluated at `x`.
    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
        cols: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    PixelShuffle(Var, usize),
    Resize(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ChannelAffine(Var, Vec<T>),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Crop(Var, usize, usize),
    Paste {
        base: Var,
        patch: Var,
        r0: usize,
        c0: usize,
    },
    Sum(Var),
    SumSquares(Var),
    WeightedL1 {
        pred: Var,
        target: Tensor<T>,
        rows: Vec<T>,
        channels: Vec<T>,
    },
    Custom(Var, Arc<dyn DiffFunction<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Graph::backward`] can replay it in reverse.
///
/// Parameters are read from a borrowed [`ParamStore`]; gradients come back as a
/// [`GradSet`] so several graphs can share one store across threads.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// 2-D convolution with zero "same" padding for odd kernels at stride 1,
    /// or non-overlapping "valid" patches when `stride == kernel size`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, DiffError> {
        let geom = kernels::ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(DiffError::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} for {} output channels", self.value(b).shape(), geom.c_out),
                });
            }
        }
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.c_out * geom.out_len()];
        T::gemm(
            geom.c_out,
            geom.patch_len(),
            geom.out_len(),
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let n = geom.out_len();
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * n..(co + 1) * n].iter_mut().for_each(|o| *o = *o + bv);
            }
        }
        let value = Tensor::from_vec(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, needs))
    }

    /// Layer normalization across channels at every spatial position.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(DiffError::Shape {
                op: "layer_norm",
                detail: format!("affine parameters must have {c} entries"),
            });
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            c,
            h * w,
            T::of(eps),
        );
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        let value = Tensor::from_vec(&[c, h, w], y)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        let needs = self.ng(x);
        self.push(value, Op::Silu(x), needs)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, DiffError> {
        let value = kernels::pixel_shuffle(self.value(x), r)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::PixelShuffle(x, r), needs))
    }

    /// Bilinear resampling with corner alignment.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var, DiffError> {
        let value = kernels::bilinear_resize(self.value(x), h, w)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Resize(x), needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, DiffError> {
        self.value(a)
            .zip_map(self.value(b), f)
            .map_err(|e| e.with_op(name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let needs = self.ng(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    /// `y[c] = x[c] * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if scale.len() != c || shift.len() != c {
            return Err(DiffError::Shape {
                op: "channel_affine",
                detail: format!("{} / {} coefficients for {c} channels", scale.len(), shift.len()),
            });
        }
        let mut value = self.value(x).clone();
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            value.plane_mut(ch).iter_mut().for_each(|v| *v = *v * s + t);
        }
        let _ = (h, w);
        let needs = self.ng(x);
        Ok(self.push(value, Op::ChannelAffine(x, scale.to_vec()), needs))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, DiffError> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&parts)?;
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(value, Op::Concat(xs.to_vec()), needs))
    }

    /// Channels `start..start + count` of a `[C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var, DiffError> {
        let (c, h, w) = self.value(x).chw()?;
        if count == 0 || start + count > c {
            return Err(DiffError::Shape {
                op: "slice_channels",
                detail: format!("channels {start}..{} of {c}", start + count),
            });
        }
        let plane = h * w;
        let data = self.value(x).data()[start * plane..(start + count) * plane].to_vec();
        let value = Tensor::from_vec(&[count, h, w], data)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::SliceChannels(x, start), needs))
    }

    pub fn crop(&mut self, x: Var, r0: usize, c0: usize, h: usize, w: usize) -> Result<Var, DiffError> {
        let value = self.value(x).crop(r0, c0, h, w)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Crop(x, r0, c0), needs))
    }

    /// `base` with the window at `(r0, c0)` replaced by `patch`.
    pub fn paste(&mut self, base: Var, patch: Var, r0: usize, c0: usize) -> Result<Var, DiffError> {
        let mut value = self.value(base).clone();
        value.paste(self.value(patch), r0, c0)?;
        let needs = self.ng(base) || self.ng(patch);
        Ok(self.push(value, Op::Paste { base, patch, r0, c0 }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.ng(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), needs)
    }

    /// `(1/(C·H·W)) Σ channels[c]·rows[i]·|pred − target|` against a constant target.
    pub fn weighted_l1(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        rows: &[T],
        channels: &[T],
    ) -> Result<Var, DiffError> {
        let p = self.value(pred);
        p.expect_same_shape(target, "weighted_l1")?;
        let (c, h, w) = p.chw()?;
        if rows.len() != h || channels.len() != c {
            return Err(DiffError::Shape {
                op: "weighted_l1",
                detail: format!("{} row and {} channel weights for {c}x{h}x{w}", rows.len(), channels.len()),
            });
        }
        let mut acc = T::zero();
        for ch in 0..c {
            for i in 0..h {
                let off = (ch * h + i) * w;
                let row: T = p.data()[off..off + w]
                    .iter()
                    .zip(&target.data()[off..off + w])
                    .map(|(&a, &b)| (a - b).abs())
                    .sum();
                acc = acc + row * rows[i] * channels[ch];
            }
        }
        let value = Tensor::scalar(acc / T::of((c * h * w) as f64));
        let needs = self.ng(pred);
        Ok(self.push(
            value,
            Op::WeightedL1 {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
                channels: channels.to_vec(),
            },
            needs,
        ))
    }

    pub fn custom(&mut self, x: Var, f: Arc<dyn DiffFunction<T>>) -> Var {
        let value = f.forward(self.value(x));
        let needs = self.ng(x);
        self.push(value, Op::Custom(x, f), needs)
    }

    /// Reverse-mode sweep from a scalar `loss`; returns d loss / d parameter for every
    /// trainable parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<GradSet<T>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = GradSet::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let mut send = |v: Var, g: Tensor<T>| accumulate(&mut grads[v.0], g);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.grads.get_mut(id) {
                    Some(g) => g.add_assign(&dy),
                    None => {
                        out.grads.insert(*id, dy);
                    }
                },
                Op::Conv { x, w, b, geom, cols } => {
                    let n = geom.out_len();
                    if self.ng(*w) {
                        let mut dw = vec![T::zero(); geom.c_out * geom.patch_len()];
                        T::gemm(geom.c_out, n, geom.patch_len(), T::one(), dy.data(), false, cols, true, T::zero(), &mut dw);
                        send(*w, Tensor::from_vec(self.value(*w).shape(), dw)?);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let db = (0..geom.c_out)
                                .map(|co| dy.data()[co * n..(co + 1) * n].iter().copied().sum())
                                .collect();
                            send(*b, Tensor::from_vec(self.value(*b).shape(), db)?);
                        }
                    }
                    if self.ng(*x) {
                        let mut dcols = vec![T::zero(); geom.patch_len() * n];
                        T::gemm(
                            geom.patch_len(),
                            geom.c_out,
                            n,
                            T::one(),
                            self.value(*w).data(),
                            true,
                            dy.data(),
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        let dx = kernels::col2im(&dcols, geom);
                        send(*x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (c, h, w) = dy.chw()?;
                    let (dx, dg, db) = kernels::layer_norm_backward(
                        dy.data(),
                        xhat,
                        rstd,
                        self.value(*gain).data(),
                        c,
                        h * w,
                    );
                    if self.ng(*x) {
                        send(*x, Tensor::from_vec(&[c, h, w], dx)?);
                    }
                    if self.ng(*gain) {
                        send(*gain, Tensor::from_vec(self.value(*gain).shape(), dg)?);
                    }
                    if self.ng(*bias) {
                        send(*bias, Tensor::from_vec(self.value(*bias).shape(), db)?);
                    }
                }
                Op::Silu(x) => {
                    let g = self.value(*x).zip_map(&dy, |v, d| d * kernels::silu_grad(v))?;
                    send(*x, g);
                }
                Op::PixelShuffle(x, r) => {
                    send(*x, kernels::pixel_unshuffle(&dy, *r)?);
                }
                Op::Resize(x) => {
                    let (_, h, w) = self.value(*x).chw()?;
                    send(*x, kernels::bilinear_resize_adjoint(&dy, h, w)?);
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        send(*a, dy.clone());
                    }
                    if self.ng(*b) {
                        send(*b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        send(*a, dy.clone());
                    }
                    if self.ng(*b) {
                        send(*b, dy.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(*a, dy.zip_map(self.value(*b), |d, v| d * v)?);
                    }
                    if self.ng(*b) {
                        send(*b, dy.zip_map(self.value(*a), |d, v| d * v)?);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    send(*x, dy.map(|d| d * s));
                }
                Op::ChannelAffine(x, scale) => {
                    let mut g = dy;
                    for (ch, &s) in scale.iter().enumerate() {
                        g.plane_mut(ch).iter_mut().for_each(|d| *d = *d * s);
                    }
                    send(*x, g);
                }
                Op::Concat(xs) => {
                    let (_, h, w) = dy.chw()?;
                    let mut start = 0;
                    for &v in xs {
                        let len = self.value(v).len();
                        if self.ng(v) {
                            let part = dy.data()[start..start + len].to_vec();
                            send(v, Tensor::from_vec(&[len / (h * w), h, w], part)?);
                        }
                        start += len;
                    }
                }
                Op::SliceChannels(x, start) => {
                    let (_, h, w) = dy.chw()?;
                    let mut g = Tensor::zeros(self.value(*x).shape());
                    let off = start * h * w;
                    g.data_mut()[off..off + dy.len()].copy_from_slice(dy.data());
                    send(*x, g);
                }
                Op::Crop(x, r0, c0) => {
                    let mut g = Tensor::zeros(self.value(*x).shape());
                    g.paste(&dy, *r0, *c0)?;
                    send(*x, g);
                }
                Op::Paste { base, patch, r0, c0 } => {
                    let (_, ph, pw) = self.value(*patch).chw()?;
                    if self.ng(*patch) {
                        send(*patch, dy.crop(*r0, *c0, ph, pw)?);
                    }
                    if self.ng(*base) {
                        let mut g = dy;
                        g.paste(&Tensor::zeros(self.value(*patch).shape()), *r0, *c0)?;
                        send(*base, g);
                    }
                }
                Op::Sum(x) => {
                    send(*x, Tensor::full(self.value(*x).shape(), dy.item()));
                }
                Op::SumSquares(x) => {
                    let d = dy.item();
                    let two = T::of(2.0);
                    send(*x, self.value(*x).map(|v| two * v * d));
                }
                Op::WeightedL1 {
                    pred,
                    target,
                    rows,
                    channels,
                } => {
                    let p = self.value(*pred);
                    let (c, h, w) = p.chw()?;
                    let k = dy.item() / T::of((c * h * w) as f64);
                    let mut g = Tensor::zeros(p.shape());
                    for ch in 0..c {
                        for i in 0..h {
                            let f = k * rows[i] * channels[ch];
                            let off = (ch * h + i) * w;
                            for j in off..off + w {
                                let d = p.data()[j] - target.data()[j];
                                g.data_mut()[j] = if d > T::zero() {
                                    f
                                } else if d < T::zero() {
                                    -f
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                    send(*pred, g);
                }
                Op::Custom(x, f) => {
                    send(*x, f.vjp(self.value(*x), &dy));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
