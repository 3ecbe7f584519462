//! Square-root second-order extended Kalman filtering for dynamic factor
//! models whose coefficients drift as random walks.
//!
//! The pieces, bottom-up:
//! - [`linalg`]: Cholesky / QR kernels for square-root covariance propagation.
//! - [`model`]: coefficient patterns, the π layout, and `f`, `h` with derivatives.
//! - [`filter`]: SR-SEKF and standard SEKF forward passes, RTS smoother.
//! - [`tuner`]: prediction-error likelihood optimization of π.
//! - [`simgen`]: synthetic data generation for the Monte Carlo designs.
//! - [`mc`]: replication harness and summary tables.
//! - [`data`]: CSV input/output.

pub mod data;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod tuner;

pub use error::{Error, Result};
