//! Dense `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! The primitive set is deliberately small: what the skeleton encoder and the
//! contrastive losses need, and nothing else. Broadcasting is limited to a
//! right-hand operand that matches a trailing part of the left-hand shape.
//!
//! ```
//! use crossclr_core::numcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(&[3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use graph::{ChannelStats, Gradients, Graph, Var};
pub(crate) use graph::logsumexp_slice;
pub use tensor::Tensor;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub(crate) fn invalid(op: &'static str, detail: String) -> Self {
        Self::Invalid { op, detail }
    }
}
