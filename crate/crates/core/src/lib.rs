//! Depth-adaptive variational super-resolution.

pub mod degrade;
pub mod error;
pub mod field;
pub mod kernels;
pub mod metrics;
pub mod regularize;
pub mod scenes;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
