//! Dense tensors, forward kernels, a reverse-mode tape, parameter storage
//! and the optimizer.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamWConfig, OptimState};
pub use params::{Param, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("rows have differing lengths")]
    Ragged,
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),
}
