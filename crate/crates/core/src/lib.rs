//! Resampling audit of personalization by a Thompson-sampling mobile-health
//! algorithm.
//!
//! The pipeline fits a per-user reward model, freezes the user's exogenous
//! context and residual noise, and reruns the online algorithm many times
//! under a ground truth with no (or no feature-specific) advantage. Comparing
//! interestingness scores of the observed forecasts against the resampled
//! ones tells how often such patterns arise from algorithmic randomness alone.

pub mod bayes;
pub mod error;
pub mod generative;
pub mod io;
pub mod interestingness;
pub mod model;
pub mod policy;
pub mod rng;
pub mod study;
pub mod synth;

pub use error::{Error, Result};
