//! Coordinate-subsampled SVRG for least squares and top eigenvectors on
//! numerically sparse matrices.

pub mod cli_bench;
pub mod eigensolver;
pub mod error;
pub mod generator;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod regression;
pub mod sparse_matrix;
pub mod svrg_core;

pub use error::{Error, Result};
pub use report::SolveReport;
