//! Knowledge-gradient policies for sparse linear and sparse additive belief models.
//!
//! The crate is organised bottom-up:
//!
//! * [`kg`]: envelope expectations and knowledge-gradient values.
//! * [`belief`]: Bayesian belief states and their updates.
//! * [`lasso`]: the recursive ℓ1,∞ group Lasso and its covariance estimate.
//! * [`splines`]: B-spline bases and additive feature maps.
//! * [`policy`]: the measurement policies.
//! * [`sim`]: truths, benchmark functions, metrics and the replication runner.
//! * [`config`]: experiment configuration files.

pub mod belief;
pub mod config;
pub mod error;
pub mod kg;
pub mod lasso;
pub mod policy;
pub mod report;
pub mod sim;
mod linalg;
pub mod splines;

pub use error::{Error, Result};
