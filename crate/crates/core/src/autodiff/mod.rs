//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`] walks the recording
//! in reverse and returns exact gradients for every differentiable leaf. The primitive set is
//! deliberately small: exactly what the graph model, the temporal encoder and the losses use.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{BatchStats, Gradients, Mode, RunningStats, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[cfg(test)]
mod tests;
