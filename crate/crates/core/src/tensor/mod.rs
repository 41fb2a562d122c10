//! Dense tensors with a reverse-mode autodiff tape.

pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use kernels::AttnMask;
pub use scalar::{DType, Float};
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;
