//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each operation as it is executed. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients on leaves. Only the operations the forecasting network needs are
//! provided; there is no general broadcasting.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_gradients, op_suite, relative_error, relative_error_above, GradCheckReport};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}..{end} out of bounds for axis of size {size}")]
    OutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("{op}: invalid axis {axis}")]
    BadAxis { op: &'static str, axis: usize },
    #[error("concat of an empty list")]
    EmptyConcat,
    #[error("mask with {mask} entries does not match logits of shape {logits:?}")]
    MaskSize { logits: Vec<usize>, mask: usize },
    #[error("invalid mask: row {row} has no unmasked entries")]
    EmptyMaskRow { row: usize },
    #[error("dropout keep probability {0} outside (0, 1]")]
    KeepProbability(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
