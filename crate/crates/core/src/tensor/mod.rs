//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is the storage type for parameters and data (always `f32`,
//! row-major). Computation happens on a [`Tape`], which records every op so
//! that [`Tape::backward`] can replay the chain rule in reverse creation
//! order. The tape is generic over [`Real`] so the same graph can be run in
//! `f64` for finite-difference checking.

mod fault;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;

pub use fault::{clear_fault, inject_fault, FaultOp};
pub use gradcheck::{grad_check, GradCheckReport, InputReport};
pub use real::Real;
pub use tape::{Gradients, Mask, Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "tensor shape {shape:?} must have rank >= 1 and every dim >= 1"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor".into(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad<R: Real>(&mut self, g: &[R]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v.as_f32();
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<f32>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
