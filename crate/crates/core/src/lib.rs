//! Core algorithms for graph-attention forecasting anomaly detection on
//! sensor networks, plus the spatio-temporal benchmark generator used to
//! evaluate it.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command line and run configuration live in the companion `gnnad` crate.
//!
//! Module map:
//!
//! - [`series`]: multivariate series, chronological splits, min-max scaling
//!   and lag windows.
//! - [`simgen`]: planar and river-network layouts, Euclidean and tail-up
//!   kernels, moving-average covariate fields and the linear mixed response.
//! - [`anomgen`]: drift and high-variability subsequence anomaly injection.
//! - [`autodiff`]: a small reverse-mode tape over the operations the
//!   forecaster needs, with a finite-difference checker.
//! - [`gdn`]: the graph-attention forecaster and its training loop.
//! - [`detector`]: robust error scoring, the global, sensor-level and
//!   positivity threshold rules, metrics and the random-walk baseline.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod anomgen;
pub mod autodiff;
pub mod detector;
pub mod error;
pub mod gdn;
pub mod linalg;
pub mod rng;
pub mod series;
pub mod simgen;
pub mod stats;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use series::MultivariateSeries;
