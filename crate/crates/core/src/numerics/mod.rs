//! Dense f32 tensor math with a reverse-mode tape and an Adam optimizer.
//!
//! Everything here is sized for desk-scale models: buffers are flat
//! row-major `Vec<f32>`, kernels are plain loops with a fixed accumulation
//! order, and a fresh [`Tape`] is built per forward pass. Determinism
//! outranks speed: identical inputs produce bitwise-identical outputs.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{attention, AttentionOut, BufId, Tape};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

use thiserror::Error;

/// Errors surfaced by forward ops, the backward pass, and the optimizer.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
