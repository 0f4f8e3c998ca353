//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every forward operation on a [`Tape`] computes its value eagerly and
//! records how to push gradients back to its inputs. [`Tape::backward`] then
//! sweeps the tape once in reverse, accumulating into leaf gradients.
//! Only leaf gradients are retained in the returned [`Gradients`].
//!
//! ```
//! use icdlaat_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use scalar::Scalar;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("slice [{start}, {start}+{len}) out of range for dimension {dim}")]
    SliceOutOfRange { start: usize, len: usize, dim: usize },
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

#[cfg(test)]
mod tests;
