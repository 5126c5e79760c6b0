use std::collections::BTreeMap;

use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Owns every parameter of a model, addressed by [`ParamId`] or by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(id)
    }

    /// Kernel `[out, in, k, k]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_kernel<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        rng: &mut R,
    ) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let value = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.add(name, value, true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds a gradient set (from [`super::Graph::backward`]) into the stored gradients.
    pub fn accumulate(&mut self, grads: &GradSet<T>) {
        for (id, g) in &grads.grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameter gradients produced by one backward pass, in deterministic id order.
#[derive(Debug, Clone, Default)]
pub struct GradSet<T: Scalar> {
    pub(crate) grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    /// Element-wise sum; used to reduce per-sample gradients in a fixed order.
    pub fn merge(&mut self, other: GradSet<T>) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
}
