//! Dense row-major float64 tensors.
//!
//! A [`Tensor`] is a plain value: shape plus contiguous data. Scalars have an
//! empty shape and one element. Gradients live in the optional `grad` buffer,
//! filled in by the training loop after a backward pass.

use crate::error::{Error, Result};
use crate::numerics::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Uniform(-bound, bound) initialization (embedding tables).
    pub fn uniform_init(shape: Vec<usize>, bound: f64, rng: &mut CounterRng) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Normal(0, 1/sqrt(fan_in)) initialization (linear maps).
    pub fn fan_in_init(shape: Vec<usize>, fan_in: usize, rng: &mut CounterRng) -> Self {
        let n = numel(&shape);
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// NaN/Inf is an error state, never silent.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::shape(format!("non-finite value at flat index {i}"))),
        }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }
}

/// Relative error between two scalars with a floor for near-zero values.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max elementwise relative error between two equally sized slices.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}
