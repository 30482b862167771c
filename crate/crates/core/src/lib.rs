//! Mixture-of-Experts layers whose experts are learned butterfly rotations of
//! one shared ternary-quantized weight matrix.

pub mod analysis;
pub mod autodiff;
pub mod butterfly;
pub mod checkpoint;
pub mod cli;
pub mod counters;
pub mod error;
pub mod model;
pub mod moe;
pub mod scalar;
pub mod tasks;
pub mod ternary;

pub use error::{Error, Result};
pub use scalar::Real;
