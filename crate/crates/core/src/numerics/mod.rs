//! Dense tensors and tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use scalar::Scalar;
pub use tape::{AttentionParams, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
