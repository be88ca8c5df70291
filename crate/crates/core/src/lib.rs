//! Probabilistic deep metric learning for patch-based hyperspectral pixel
//! classification.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the common choices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod grad;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{PdmlError, Result};
pub use scalar::Scalar;

pub type Tensor64 = grad::Tensor<f64>;
pub type Tensor32 = grad::Tensor<f32>;
pub type ParamStore64 = grad::ParamStore<f64>;
pub type ParamStore32 = grad::ParamStore<f32>;
pub type Gradients64 = grad::Gradients<f64>;
pub type Gradients32 = grad::Gradients<f32>;
pub type PatchBatch64 = data::PatchBatch<f64>;
pub type PatchBatch32 = data::PatchBatch<f32>;
pub type GaussianField64 = model::GaussianField<f64>;
pub type GaussianField32 = model::GaussianField<f32>;
pub type Checkpoint64 = grad::Checkpoint<f64>;
pub type Checkpoint32 = grad::Checkpoint<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
