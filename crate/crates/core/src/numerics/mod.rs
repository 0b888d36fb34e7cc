//! Minimal dense linear algebra with reverse-mode automatic differentiation.
//!
//! Everything is float32 in storage; reductions (matrix products, sums,
//! softmax denominators, norms) accumulate in float64 before rounding back,
//! and scalar outputs keep a float64 shadow value so loss comparisons and
//! finite-difference checks are not limited by float32 output quantization.

mod finite_diff;
mod tape;
mod tensor;
pub mod transformer;

pub use finite_diff::finite_diff_check;
pub use tape::{masked_softmax, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and gradient
/// utilities.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("masked softmax row {row} has no unmasked entries")]
    AllMasked { row: usize },
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardAlreadyRan,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::InvalidArgument { op, detail: detail.into() }
    }
}
