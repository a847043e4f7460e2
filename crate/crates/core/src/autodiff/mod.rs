//! Dense reverse-mode automatic differentiation over `f64` tensors.

pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_grad_norm, zero_grads, AdamW};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub(crate) use tape::soft_min;
pub use tensor::Tensor;
