//! Thompson-sampling action layer: standardized advantage forecast, the
//! clipping map `h`, treatment randomization, and the threshold `η_d(x)`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::bayes::DayObservation;
use crate::error::{Error, Result};
use crate::model::{FVector, F_DIM};

/// Lower clip of the treatment probability.
pub const PROB_MIN: f64 = 0.2;
/// Upper clip of the treatment probability.
pub const PROB_MAX: f64 = 0.8;
/// Variances `fᵀΣf` at or below this are rejected as degenerate.
pub const VARIANCE_TOL: f64 = 1e-12;

/// User-supplied threshold rule.
pub trait ThresholdHook: Send + Sync + fmt::Debug {
    /// `η(x)` at dosage `x`.
    fn threshold(&self, dosage: f64) -> f64;

    /// Nightly update alongside the posterior. `None` keeps the current rule.
    fn updated(&self, _day: usize, _batch: &[DayObservation]) -> Option<Arc<dyn ThresholdHook>> {
        None
    }
}

/// The threshold `η_d` compared against the posterior advantage.
#[derive(Clone, Debug)]
pub enum ThresholdPolicy {
    Constant(f64),
    Custom(Arc<dyn ThresholdHook>),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Constant(0.0)
    }
}

impl ThresholdPolicy {
    pub fn custom(hook: impl ThresholdHook + 'static) -> Self {
        ThresholdPolicy::Custom(Arc::new(hook))
    }

    /// Rule for the next day. Constant thresholds pass through unchanged.
    pub fn next(&self, day: usize, batch: &[DayObservation]) -> Self {
        match self {
            ThresholdPolicy::Constant(_) => self.clone(),
            ThresholdPolicy::Custom(hook) => match hook.updated(day, batch) {
                Some(h) => ThresholdPolicy::Custom(h),
                None => self.clone(),
            },
        }
    }
}

pub fn eta_evaluate(policy: &ThresholdPolicy, dosage: f64) -> f64 {
    match policy {
        ThresholdPolicy::Constant(c) => *c,
        ThresholdPolicy::Custom(hook) => hook.threshold(dosage),
    }
}

/// `Δ̂ = (μ_βᵀf − η) / sqrt(fᵀΣ_βf)`.
pub fn standardized_advantage(
    beta_mu: &FVector,
    beta_sigma: &nalgebra::SMatrix<f64, F_DIM, F_DIM>,
    f: &FVector,
    eta: f64,
) -> Result<f64> {
    let var = (beta_sigma * f).dot(f);
    if var.is_nan() || var <= VARIANCE_TOL {
        return Err(Error::DegenerateVariance(var));
    }
    Ok((beta_mu.dot(f) - eta) / var.sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `h(p) = min{0.8, 0.2 + 1.6·max{p − 0.5, 0}}`.
pub fn clip(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(clip_unchecked(p))
}

fn clip_unchecked(p: f64) -> f64 {
    PROB_MAX.min(PROB_MIN + (0.8 / 0.5) * (p - 0.5).max(0.0))
}

/// Treatment probability `h(Φ(Δ̂))`.
pub fn action_probability(delta: f64) -> f64 {
    clip_unchecked(normal_cdf(delta).clamp(0.0, 1.0))
}

/// Bernoulli draw consuming exactly one uniform from `rng`.
pub fn sample_action<R: Rng + ?Sized>(prob: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < prob
}
