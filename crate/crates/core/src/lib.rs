//! Transformer encoders for multivariate time-series forecasting with learnable
//! injection of positional and semantic input topology into every layer,
//! trained by bi-level optimization, plus kernel-dependence diagnostics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod matrix;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
