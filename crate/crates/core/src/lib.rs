//! Magnetic-field-aided inertial navigation with an observability-constrained
//! error-state EKF.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod filter;
pub mod io;
pub mod magfield;
pub mod observability;
pub mod simulator;

pub use error::{Error, Result};
