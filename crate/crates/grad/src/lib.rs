//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! All arithmetic is `f64`. Graphs are built eagerly as operations run and are
//! owned by the tensors that reference them, so a graph lives exactly as long as
//! its output is held. Tensors are `!Send`; move [`Parameter`] values between
//! threads instead.

mod error;
mod gradcheck;
pub mod ops;
mod param;
mod tensor;

pub use error::{GradError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use param::Parameter;
pub use tensor::Tensor;
