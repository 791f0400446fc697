//! Dense tensors and a reverse-mode tape covering the operators STIN needs.

pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::Geometry;
pub use scalar::Scalar;
pub use tape::{Activation, PoolMode, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
