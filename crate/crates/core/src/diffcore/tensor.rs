use std::fmt;

use super::scalar::Scalar;
use super::DiffError;

/// Dense row-major tensor. Spatial tensors use the `[channels, height, width]` layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize), DiffError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(DiffError::Shape {
                op: "chw",
                detail: format!("expected rank 3, got {:?}", self.shape),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DiffError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: T) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j] = v;
    }

    /// One `[height, width]` plane of a rank-3 tensor.
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, DiffError> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Spatial window `[rows r0..r0+h, cols c0..c0+w]` of every channel.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self, DiffError> {
        let (c, hh, ww) = self.chw()?;
        if r0 + h > hh || c0 + w > ww {
            return Err(DiffError::Shape {
                op: "crop",
                detail: format!("window {h}x{w} at ({r0},{c0}) exceeds {hh}x{ww}"),
            });
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                let start = (ch * hh + r0 + i) * ww + c0;
                out.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            shape: vec![c, h, w],
            data: out,
        })
    }

    /// Overwrites the spatial window at `(r0, c0)` with `patch`.
    pub fn paste(&mut self, patch: &Self, r0: usize, c0: usize) -> Result<(), DiffError> {
        let (c, hh, ww) = self.chw()?;
        let (pc, ph, pw) = patch.chw()?;
        if pc != c || r0 + ph > hh || c0 + pw > ww {
            return Err(DiffError::Shape {
                op: "paste",
                detail: format!("{:?} at ({r0},{c0}) into {:?}", patch.shape, self.shape),
            });
        }
        for ch in 0..c {
            for i in 0..ph {
                let dst = (ch * hh + r0 + i) * ww + c0;
                let src = (ch * ph + i) * pw;
                self.data[dst..dst + pw].copy_from_slice(&patch.data[src..src + pw]);
            }
        }
        Ok(())
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self, DiffError> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| DiffError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            })?
            .chw()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            let (c, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(DiffError::Shape {
                    op: "concat",
                    detail: format!("spatial {ph}x{pw} vs {h}x{w}"),
                });
            }
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![channels, h, w],
            data,
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<(), DiffError> {
        if self.shape != other.shape {
            return Err(DiffError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
