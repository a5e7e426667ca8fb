//! Desk-scale transfer learning with knowledge distillation, plus an exact
//! Shapley attribution engine and the statistics needed to quantify
//! foreground/background contributions.

pub mod attribution;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
