//! Simulation, drift tracking, maximum-likelihood tomography and scoring of
//! four-dimensional time-bin entangled photon pairs measured with cascaded
//! delay interferometers.

// NaN must fail the positivity checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod drift;
pub mod error;
pub mod formats;
pub mod harness;
pub mod metrics;
pub mod mzi;
pub mod qudit;
pub mod sim;
pub mod tomography;

pub use error::{Error, Result};
