//! Minimal reverse-mode differentiable tensor engine.
//!
//! Values are recorded on a [`Graph`] as ops execute; [`Graph::backward`]
//! replays the record in reverse. One graph per training step.

mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_many, rel_err, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var, EPS};
pub use ops::sign_tensor;
pub use tensor::Tensor;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: invalid geometry for input {input:?} and kernel {kernel:?} (output extent would be {output:?})")]
    Geometry {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        output: Vec<isize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("empty input")]
    Empty,
}

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Abs,
    Clamp(f64, f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Applies `op`; binary ops need `other`.
    pub fn elementwise(self, op: Elementwise, other: Option<Var<'g, T>>) -> Result<Var<'g, T>, TensorError> {
        if op.is_binary() {
            let b = other.ok_or(TensorError::Empty)?;
            return match op {
                Elementwise::Add => self.add(b),
                Elementwise::Sub => self.sub(b),
                Elementwise::Mul => self.mul(b),
                _ => self.div(b),
            };
        }
        Ok(match op {
            Elementwise::Neg => self.neg(),
            Elementwise::Exp => self.exp(),
            Elementwise::Log => self.log(),
            Elementwise::Abs => self.abs(),
            Elementwise::Clamp(lo, hi) => self.clamp(lo, hi),
            Elementwise::Relu => self.relu(),
            Elementwise::Tanh => self.tanh(),
            _ => self.sigmoid(),
        })
    }
}
