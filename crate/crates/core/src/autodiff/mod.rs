//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive applications in construction order; a single
//! reverse sweep from a scalar output yields [`Gradients`], which can be
//! accumulated into a [`ParameterStore`]. Tapes are cheap and single-threaded:
//! build one per training instance and reduce the gradients afterwards.

mod array;
pub mod check;
mod params;
mod tape;

use thiserror::Error;

pub use array::Array;
pub(crate) use array::{dot, sigmoid, softmax_row};
pub use check::{grad_check, grad_check_store, relative_error};
pub use params::{Manifest, ManifestEntry, ParamId, ParameterStore};
pub use tape::{Gradients, Primitive, Tape, Var};

/// Lower bound applied to probabilities before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} outside the domain (floor {LOG_FLOOR})")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: index {index} out of range for extent {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter serialization: {0}")]
    Serialization(String),
}
