//! Dense kernels, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod fastmath;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{GradTape, Gradients, NodeId};
pub use fastmath::{exp, tanh};
pub use tensor::Tensor;
pub(crate) use tensor::{gemm, MatRef};
