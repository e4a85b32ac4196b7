//! Post-hoc out-of-distribution detection for 3D object detector features.
//!
//! A small head maps per-object detector features (plus scene context and
//! box geometry) into a frozen text-embedding space. Objects are then scored
//! by their norm-scaled cosine similarity to a bank of class prompts.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use tensor::{Tensor, TensorError};
