//! Convective-storm nowcasting at desk scale.
//!
//! The crate is organized along the data flow:
//!
//! - [`tensor`]: f64 tensors with tape-based reverse-mode differentiation
//! - [`synth`]: synthetic radar and thermodynamic event generation, grid files
//! - [`pipeline`]: time differencing, normalization, cell sampling, oversampling, splits
//! - [`model`]: the CNN-LSTM nowcaster, training, inference and model files
//! - [`verify`]: confusion matrices, skill scores, ROC/AUC, baselines, outcome maps

pub mod error;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{NowcastError, Result};
