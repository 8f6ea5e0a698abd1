//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they run; [`Tape::backward`] walks the record in
//! reverse and accumulates gradients into every node that depends on a trainable leaf.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
