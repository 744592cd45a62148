//! Spectral estimation of degree-corrected mixed-membership networks, with
//! shared-subspace transfer from auxiliary source networks.
//!
//! The crate is organised bottom-up: [`model`] holds the parameter types and
//! the Bernoulli sampler, [`spectral`] the eigen/sketch/projector primitives,
//! [`mixed_score`] the single-network estimator, [`transfer`] the oracle and
//! selective multi-network estimators, and [`eval`] the simulation harness.

// `!(x > t)` comparisons are deliberate: they send NaN down the failure path
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod mixed_score;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod transfer;

pub use error::{Error, Result};
