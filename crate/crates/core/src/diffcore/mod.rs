//! Minimal reverse-mode differentiable tensor layer: exactly the convolution,
//! normalization, activation and resampling vocabulary the assimilation network needs.

mod graph;
pub(crate) mod kernels;
mod param;
mod scalar;
mod tensor;

#[cfg(test)]
mod tests;

use thiserror::Error;

pub use graph::{DiffFunction, Graph, Var};
pub use param::{GradSet, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported convolution: kernel {k} with stride {stride}")]
    InvalidKernel { k: usize, stride: usize },
    #[error("pixel shuffle: {channels} channels not divisible by {factor}^2")]
    IndivisibleChannels { channels: usize, factor: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl DiffError {
    pub(crate) fn with_op(self, op: &'static str) -> Self {
        match self {
            DiffError::Shape { detail, .. } => DiffError::Shape { op, detail },
            other => other,
        }
    }
}

/// Forward-only helpers on plain tensors.
pub mod ops {
    use super::{kernels, DiffError, Scalar, Tensor};

    pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(kernels::silu)
    }

    pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, DiffError> {
        kernels::pixel_shuffle(x, r)
    }

    pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, DiffError> {
        kernels::pixel_unshuffle(x, r)
    }

    pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>, DiffError> {
        kernels::bilinear_resize(x, h, w)
    }
}

/// Central finite-difference oracle for reverse-mode gradients.
pub mod gradcheck {
    use super::{DiffError, Graph, ParamStore, Tensor, Var};

    #[derive(Debug, Clone)]
    pub struct GroupError {
        pub name: String,
        pub checked: usize,
        /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
        pub rel_error: f64,
        pub analytic_norm: f64,
    }

    /// Compares `Graph::backward` against central differences with step `h` for up to
    /// `per_param` evenly spaced entries of every trainable parameter.
    pub fn check<F>(store: &mut ParamStore<f64>, loss_fn: F, h: f64, per_param: usize) -> Result<Vec<GroupError>, DiffError>
    where
        F: Fn(&mut Graph<'_, f64>) -> Result<Var, DiffError>,
    {
        let eval = |s: &ParamStore<f64>| -> Result<f64, DiffError> {
            let mut g = Graph::new(s);
            let l = loss_fn(&mut g)?;
            Ok(g.value(l).item())
        };
        let grads = {
            let mut g = Graph::new(store);
            let l = loss_fn(&mut g)?;
            g.backward(l)?
        };
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let mut out = Vec::new();
        for id in ids {
            let n = store.get(id).value.len();
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
            let stride = (n / per_param.max(1)).max(1);
            let (mut diff2, mut a2, mut n2, mut checked) = (0.0, 0.0, 0.0, 0);
            for i in (0..n).step_by(stride) {
                let orig = store.get(id).value.data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let up = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let down = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[i];
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
                checked += 1;
            }
            let scale = a2.sqrt().max(n2.sqrt());
            out.push(GroupError {
                name: store.get(id).name.clone(),
                checked,
                rel_error: if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 },
                analytic_norm: a2.sqrt(),
            });
        }
        Ok(out)
    }
}
