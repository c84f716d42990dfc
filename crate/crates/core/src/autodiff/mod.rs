//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records each operation as it executes; [`Graph::backward`]
//! then walks the tape in exact reverse order. No broadcasting: binary
//! operators require identical shapes.

mod checkpoint;
pub mod conv;
mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{sigmoid, CustomBackward, Elementwise, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op} takes a different number of operands")]
    Arity { op: &'static str },
    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("conv2d: input has {input} channels, weight expects {weight}")]
    ConvChannels { input: usize, weight: usize },
    #[error("conv2d: kernel {kernel:?} must be odd and stride {stride} positive")]
    ConvKernel { kernel: (usize, usize), stride: usize },
    #[error("conv2d: input {input:?} with kernel {kernel:?}, padding {padding} has no output")]
    ConvExtent {
        input: Vec<usize>,
        kernel: (usize, usize),
        padding: usize,
    },
    #[error("range {start}+{len} outside extent {extent}")]
    Range { start: usize, len: usize, extent: usize },
    #[error("backward already ran on this graph; record a new forward pass")]
    BackwardTwice,
    #[error("backward needs a one-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    GradCheckEps(f64),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
}
