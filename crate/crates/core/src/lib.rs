//! Correlation-matrix regularization by resampling-based multiple testing,
//! with Monte Carlo and portfolio back-testing harnesses.

pub mod backtest;
pub mod error;
pub mod linalg;
pub mod matrix;
pub mod mtest;
pub mod panel;
pub mod procedure;
pub mod regularizer;
pub mod resampler;
pub mod rng;
pub mod simlab;

pub use error::{Error, Result};
pub use matrix::{HalfVec, MatrixKind, SymmetricMatrix};
pub use panel::{center, correlation_about_origin, CenteredPanel, Centering, ReturnsPanel};
