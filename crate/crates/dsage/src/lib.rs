//! Global feature importance with graph-certified evaluation skipping.
//!
//! The crate estimates Shapley-based global importance (SAGE values) for a
//! fitted predictor and accelerates the estimate by skipping surplus
//! evaluations whose value a learned causal graph certifies as zero: if a
//! feature is d-separated from the target given the features already in the
//! coalition, its surplus contribution vanishes and no Monte Carlo work is
//! spent on it.
//!
//! Modules follow the pipeline: [`dag`] (graphs and d-separation), [`scm`]
//! (synthetic linear-Gaussian ground truth), [`csl`] (BIC-scored structure
//! search), [`gaussian`] (conditional sampling), [`model`] (predictors),
//! [`citest`] (partial-correlation independence tests), [`sage`] (the
//! estimators), and [`bench`] (evaluation harness).

pub mod citest;
pub mod csl;
pub mod dag;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod model;
pub mod sage;
pub mod scm;
pub mod seed;

pub mod bench;

pub use error::{Error, Result};
