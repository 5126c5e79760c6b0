use crate::diffcore::{GradSet, ParamStore, Scalar, Tensor};

use super::{TrainConfig, TrainError};

/// Adam with decoupled weight decay: `p ← p·(1 − lr·λ)` then the adaptive step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub steps: u64,
    /// First and second moments, indexed like the store; `None` for frozen parameters.
    pub m: Vec<Option<Tensor<f32>>>,
    pub v: Vec<Option<Tensor<f32>>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::diffcore::Parameter<T>| p.trainable.then(|| Tensor::zeros(p.value.shape()));
        Self {
            steps: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// One update of every trainable parameter; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradSet<f32>, lr: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
        if self.m.len() != store.len() {
            return Err(TrainError::Shape(format!("optimizer state for {} tensors, store has {}", self.m.len(), store.len())));
        }
        self.steps += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let (Some(m), Some(v)) = (&mut self.m[id.index()], &mut self.v[id.index()]) else {
                continue;
            };
            let g = grads.get(id);
            let p = store.get_mut(id);
            for (n, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[n] as f64);
                let mi = b1 * m.data()[n] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[n] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[n] = mi as f32;
                v.data_mut()[n] = vi as f32;
                *x *= decay;
                if gi != 0.0 || mi != 0.0 {
                    *x -= (lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps)) as f32;
                }
            }
        }
        Ok(())
    }
}
