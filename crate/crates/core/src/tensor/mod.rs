//! Dense 64-bit tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Values are stored flat in row-major order next to an explicit shape.
//! Networks keep their weights in [`Parameter`]s; a forward pass registers
//! them on a [`Tape`], and [`Tape::backward`] hands back [`Gradients`] that
//! are accumulated into the parameters before an optimizer step.

mod adam;
pub mod conv;
mod tape;

pub use adam::{adam_step, AdamState};
pub(crate) use tape::clamped_ln;
pub use tape::{BatchNormMode, ElementwiseOp, Gradients, RunningStats, Tape, Var, LOG_CLAMP};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected = numel(shape);
        if expected != values.len() || shape.contains(&0) {
            return Err(Error::ValueCount {
                shape: shape.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A named, trainable tensor. Names are unique within a network and are
/// prefixed by the owning network, so they are unique across a tape too.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.set_requires_grad(true);
        Self {
            name: name.into(),
            tensor,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.tensor.values_mut()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    /// Overwrites the values, keeping the shape.
    pub fn load(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.tensor.numel() {
            return Err(Error::ParamMismatch {
                name: self.name.clone(),
                expected: self.tensor.numel(),
                actual: values.len(),
            });
        }
        self.tensor.values_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Zeroes every parameter's stored gradient.
pub fn zero_grads(params: &mut [Parameter]) {
    params.iter_mut().for_each(|p| p.tensor_mut().zero_grad());
}

/// Order-sensitive FNV-1a digest over the raw bits of a parameter set.
pub fn checksum(params: &[Parameter]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for v in p.values() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}
