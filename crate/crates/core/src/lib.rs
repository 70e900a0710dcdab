//! Pseudo-sample matching fusion of a small, biased RCT with a large
//! observational dataset, plus the synthetic harness used to measure it:
//! a data generator with known uplift, a T-learner uplift model, and
//! Qini / MAPE / COPC metrics.

// `!(x > 0.0)` is used on purpose to reject NaN along with the failing range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod nnindex;
pub mod rng;
pub mod uplift;

pub use dataset::{Dataset, Source};
pub use error::{Error, Result};
