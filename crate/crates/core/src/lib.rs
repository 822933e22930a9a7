//! Cellwise and casewise robust multivariate regression with missing-data
//! support, outlier diagnostics and bootstrap inference.

pub mod cellcov;
pub mod cellpca;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fastcellcov;
pub mod inference;
pub mod linalg;
pub mod mcd;
pub mod mkernel;
pub mod regression;
pub mod rng;
pub mod sensitivity;
pub mod simharness;

pub use error::{Error, Result};
