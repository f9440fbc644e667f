//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Supplies exactly the operator set the U-net needs: 2D convolution
//! (same-padding, stride 1), 2x2 max pooling, 2x2 stride-2 transposed
//! convolution, channel concatenation, elementwise add, Swish / ReLU /
//! Sigmoid activations, and the scalar loss reductions. Networks are built
//! on a [`Graph`] tape; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients.
//!
//! Training runs in `f32`; gradient verification runs the same generic
//! kernels in `f64` (see [`grad_check`]).

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId, Op, TV_EPS};
pub use tensor::{Element, Tensor};

use thiserror::Error;

/// Shape or argument mismatch raised by graph operations.
#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} requires spatial dims divisible by {divisor}, got {h}x{w}")]
    Indivisible {
        op: &'static str,
        divisor: usize,
        h: usize,
        w: usize,
    },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}
