//! Dual-path transformer forecasting for non-stationary multivariate series.
//!
//! Each input window is processed twice: once after per-channel instance
//! normalization and once in raw scale. Attention blocks mix the two paths'
//! attention maps through a learned gate, first across the patches of each
//! channel and then across channels, and a linear head maps the normalized
//! path back to a forecast in raw scale.

pub mod asna;
pub mod cli;
pub mod data;
pub mod error;
pub mod flops;
pub mod model;
pub mod normalization;
pub mod params;
pub mod patching;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
