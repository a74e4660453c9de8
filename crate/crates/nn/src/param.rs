use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Tensor;

/// Named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        Self::new(name, Tensor::full(shape, value))
    }

    /// Values drawn from a zero-mean normal with the given standard deviation.
    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(name, Tensor::from_vec(shape, data).expect("length matches shape"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable access; clones the storage only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replaces the value, keeping the name; the gradient is reset.
    pub fn set_value(&mut self, value: Tensor) {
        self.grad = Tensor::zeros(value.shape());
        self.value = Arc::new(value);
    }
}
