//! Randomly-weighted perceptual loss for dense prediction.

pub mod diagnostics;
pub mod error;
pub mod percep;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
