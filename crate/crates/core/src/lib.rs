//! Arithmetic-attention transformer for tabular data.
//!
//! - [`synth`]: the sparse-monomial synthetic benchmark and its splits.
//! - [`tabular`]: schemas, CSV/JSON persistence and normalization.
//! - [`model`]: embedding, additive and multiplicative attention streams,
//!   prompt tokens, fusion, the layer stack and a plain transformer baseline.
//! - [`train`]: Adam, the warmup/step-decay schedule, metrics, the training
//!   loop and the experiment runners.

pub mod error;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tabular;
pub mod train;

pub use error::{Error, Result};
