//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in row-major `Vec<f64>` buffers. A [`Tape`] records every
//! operation applied to its [`Var`] handles; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into every node that requires
//! them. Parameters are owned outside the tape (see [`Param`]) and copied in
//! as leaves for each forward pass.

mod kernels;
mod optim;
mod tape;

pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Activation, BatchNormMode, BatchStats, BnState, Tape, Var, BN_EPSILON, BN_MOMENTUM};

#[doc(hidden)]
pub use kernels::{conv2d_naive, im2col};

use crate::error::{NowcastError, Result};

/// An n-dimensional array of f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(NowcastError::dim("rank", ">= 1", 0));
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(NowcastError::dim(format!("axis {axis}"), "positive extent", 0));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(NowcastError::dim("values", len, values.len()));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    /// Rank-1 tensor over `values`. Panics on an empty vector.
    pub fn from_vec(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "tensor extents must be positive");
        Tensor {
            shape: vec![values.len()],
            values,
        }
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.values)
    }
}

/// A named trainable tensor with an optional gradient of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }
}
