//! Desk-scale laboratory for studying how the attention normalizer shapes
//! activation outliers in tiny transformers, and what those outliers do to
//! strict simulated integer quantization.

pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod quant;
pub mod runner;
pub mod rng;
pub mod softmax;
pub mod tensor;
pub mod train;

mod error;

pub use error::{LabError, Result};
