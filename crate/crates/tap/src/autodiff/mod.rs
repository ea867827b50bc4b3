//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on it; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients into the leaves
//! that were registered with `requires_grad`. Tensors are row-major `f64`
//! buffers; any non-finite value produced in the forward or backward pass
//! is a hard error.
//!
//! A tape and the node ids it hands out are confined to one thread of
//! execution. Distinct tapes are independent, so data-parallel evaluation
//! runs one tape per sample.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_strict, GradCheckReport};
pub use tape::{Tape, TensorId};
pub use tensor::{warp_bilinear, Tensor};
