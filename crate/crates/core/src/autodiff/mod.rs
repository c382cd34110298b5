//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only, records every primitive
//! as it executes and replays the list backwards in [`Tape::backward`].
//! Gradients come back as a separate [`Gradients`] value that the caller
//! folds into the store with [`ParamStore::accumulate`], so several tapes
//! can run over the same parameters concurrently.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ERROR_FLOOR};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softmax_axis, BatchMoments, NormStats, Tape, Var, BATCH_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<[usize; 2]>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
