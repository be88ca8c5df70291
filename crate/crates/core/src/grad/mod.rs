//! Minimal differentiable-evaluation substrate: tensors, the parameter store,
//! the finite-difference oracle and checkpoints.

pub mod check;
pub mod checkpoint;
pub mod params;
pub mod tensor;

pub use check::{eval_loss_and_grads, finite_diff_check, GradCheckReport, Objective, TagCheck};
pub use checkpoint::Checkpoint;
pub use params::{Gradients, ParamEntry, ParamStore, Tag};
pub use tensor::Tensor;
