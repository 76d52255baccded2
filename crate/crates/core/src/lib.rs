//! Bayesian federated learning simulation.

// `!(x >= floor)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod posterior;
pub mod runtime;
pub mod seed;

pub use error::{Error, Result};
