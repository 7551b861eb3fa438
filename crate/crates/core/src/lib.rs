//! Heterogeneous treatment effect estimation from observational data.
//!
//! The crate covers the full workflow: data preparation, logistic propensity
//! scores with iterative term selection, common-support trimming, nearest
//! neighbor matching on the linearized score, covariate/propensity
//! stratification, honest causal trees and forests, bias-formula sensitivity
//! analysis, and a synthetic data generator with known effect surfaces for
//! validation.

pub mod dataset;
pub mod error;
mod linalg;
pub mod matching;
pub mod propensity;
pub mod seed;

pub use error::{Error, Result};
