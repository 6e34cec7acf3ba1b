//! Trajectory domain types and the feature maps of the reward working model.
//!
//! Feature orders are fixed:
//!
//! * `g` (baseline): intercept, temperature, prior 30-min steps, yesterday's
//!   steps, dosage, engagement, location, variation
//! * `f` (advantage): intercept, dosage, engagement, location, variation
//! * `phi` = `[g; π·f; (A − π)·f]` (action-centered, used by the online posterior)
//! * `phi_tilde` = `[g; A·f]` (used by the offline reward-model fit)

use std::fmt;
use std::str::FromStr;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const G_DIM: usize = 8;
pub const F_DIM: usize = 5;
pub const PHI_DIM: usize = G_DIM + 2 * F_DIM;
pub const PHI_TILDE_DIM: usize = G_DIM + F_DIM;

/// Decision times per study day.
pub const SLOTS_PER_DAY: usize = 5;
/// Discount λ of the dosage recursion.
pub const DOSAGE_DECAY: f64 = 0.95;
/// Upper end of the dosage range, the fixed point 1 / (1 − λ).
pub const DOSAGE_MAX: f64 = 20.0;

pub type GVector = SVector<f64, G_DIM>;
pub type FVector = SVector<f64, F_DIM>;
pub type PhiVector = SVector<f64, PHI_DIM>;
pub type PhiTildeVector = SVector<f64, PHI_TILDE_DIM>;

/// 1-based day of a 1-based decision time.
pub fn day_of(t: usize) -> usize {
    t.div_ceil(SLOTS_PER_DAY)
}

/// Number of days spanned by `horizon` decision times.
pub fn days_for(horizon: usize) -> usize {
    horizon.div_ceil(SLOTS_PER_DAY)
}

/// Context part `Z_t` of the state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub engagement: bool,
    pub variation: bool,
    pub location: bool,
    /// Standardized temperature.
    pub temperature: f64,
    /// Standardized log step count over the prior 30 minutes.
    pub prior_30min_steps: f64,
    /// Standardized square-root step count of the previous day.
    pub yesterday_steps: f64,
}

impl ContextFeatures {
    fn check_finite(&self, t: usize) -> Result<()> {
        for (field, v) in [
            ("temperature", self.temperature),
            ("prior_30min_steps", self.prior_30min_steps),
            ("yesterday_steps", self.yesterday_steps),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature { field, t });
            }
        }
        Ok(())
    }
}

/// Affine standardization `(x − shift) / scale` for one continuous feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl Affine {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }
}

/// Standardization constants for the continuous context features. The
/// default is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Standardization {
    pub temperature: Affine,
    pub prior_30min_steps: Affine,
    pub yesterday_steps: Affine,
}

impl Standardization {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("temperature", self.temperature),
            ("prior_30min_steps", self.prior_30min_steps),
            ("yesterday_steps", self.yesterday_steps),
        ] {
            if !(a.shift.is_finite() && a.scale.is_finite() && a.scale > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "standardization for {name} needs a finite shift and a positive scale"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, ctx: &mut ContextFeatures) {
        ctx.temperature = self.temperature.apply(ctx.temperature);
        ctx.prior_30min_steps = self.prior_30min_steps.apply(ctx.prior_30min_steps);
        ctx.yesterday_steps = self.yesterday_steps.apply(ctx.yesterday_steps);
    }
}

/// One decision time of a user trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    /// 1-based decision-time index.
    pub t: usize,
    /// 1-based day, `ceil(t / 5)`.
    pub day: usize,
    pub available: bool,
    pub context: ContextFeatures,
    pub anti_sedentary: bool,
    pub dosage: f64,
    pub action: Option<bool>,
    pub action_prob: Option<f64>,
    pub reward: Option<f64>,
    /// Reward or state not observed; excluded from fits and posterior updates.
    pub missing: bool,
}

impl DecisionPoint {
    pub fn new(t: usize, available: bool, context: ContextFeatures) -> Self {
        Self {
            t,
            day: day_of(t),
            available,
            context,
            anti_sedentary: false,
            dosage: 0.0,
            action: None,
            action_prob: None,
            reward: None,
            missing: false,
        }
    }

    /// Recorded action, with an absent action read as "not treated".
    pub fn treated(&self) -> bool {
        self.action.unwrap_or(false)
    }

    /// Whether this point contributes to fits and posterior updates.
    pub fn usable(&self) -> bool {
        self.available && !self.missing && self.reward.is_some()
    }
}

/// Binary context features that can be toggled for type-2 interestingness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryFeature {
    Engagement,
    Location,
    Variation,
}

impl BinaryFeature {
    pub const ALL: [BinaryFeature; 3] = [
        BinaryFeature::Engagement,
        BinaryFeature::Location,
        BinaryFeature::Variation,
    ];

    pub fn value(self, ctx: &ContextFeatures) -> bool {
        match self {
            BinaryFeature::Engagement => ctx.engagement,
            BinaryFeature::Location => ctx.location,
            BinaryFeature::Variation => ctx.variation,
        }
    }

    pub fn set(self, ctx: &mut ContextFeatures, value: bool) {
        match self {
            BinaryFeature::Engagement => ctx.engagement = value,
            BinaryFeature::Location => ctx.location = value,
            BinaryFeature::Variation => ctx.variation = value,
        }
    }

    /// Index of this feature in `f`.
    pub fn f_index(self) -> usize {
        Feature::from(self).f_index()
    }
}

impl fmt::Display for BinaryFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Feature::from(*self).fmt(f)
    }
}

impl FromStr for BinaryFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<Feature>()? {
            Feature::Engagement => Ok(BinaryFeature::Engagement),
            Feature::Location => Ok(BinaryFeature::Location),
            Feature::Variation => Ok(BinaryFeature::Variation),
            Feature::Dosage => Err(Error::InvalidFeature(
                "dosage is not binary and cannot be toggled".into(),
            )),
        }
    }
}

/// Non-intercept coordinates of the advantage feature vector `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Dosage,
    Engagement,
    Location,
    Variation,
}

impl Feature {
    pub fn f_index(self) -> usize {
        match self {
            Feature::Dosage => 1,
            Feature::Engagement => 2,
            Feature::Location => 3,
            Feature::Variation => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Dosage => "dosage",
            Feature::Engagement => "engagement",
            Feature::Location => "location",
            Feature::Variation => "variation",
        }
    }
}

impl From<BinaryFeature> for Feature {
    fn from(b: BinaryFeature) -> Self {
        match b {
            BinaryFeature::Engagement => Feature::Engagement,
            BinaryFeature::Location => Feature::Location,
            BinaryFeature::Variation => Feature::Variation,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dosage" => Ok(Feature::Dosage),
            "engagement" => Ok(Feature::Engagement),
            "location" => Ok(Feature::Location),
            "variation" => Ok(Feature::Variation),
            "intercept" => Err(Error::InvalidFeature(
                "intercept (use the null-advantage model instead)".into(),
            )),
            other => Err(Error::InvalidFeature(other.to_string())),
        }
    }
}

fn b2f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Baseline feature vector `g(s)` from a context and a dosage.
pub fn g_vector(ctx: &ContextFeatures, dosage: f64) -> GVector {
    GVector::from([
        1.0,
        ctx.temperature,
        ctx.prior_30min_steps,
        ctx.yesterday_steps,
        dosage,
        b2f(ctx.engagement),
        b2f(ctx.location),
        b2f(ctx.variation),
    ])
}

/// Advantage feature vector `f(s)` from a context and a dosage.
pub fn f_vector(ctx: &ContextFeatures, dosage: f64) -> FVector {
    FVector::from([
        1.0,
        dosage,
        b2f(ctx.engagement),
        b2f(ctx.location),
        b2f(ctx.variation),
    ])
}

fn check_point(point: &DecisionPoint) -> Result<()> {
    point.context.check_finite(point.t)?;
    if !point.dosage.is_finite() {
        return Err(Error::NonFiniteFeature {
            field: "dosage",
            t: point.t,
        });
    }
    Ok(())
}

fn check_prob(prob: f64) -> Result<()> {
    if (0.0..=1.0).contains(&prob) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(prob))
    }
}

pub fn build_g(point: &DecisionPoint) -> Result<GVector> {
    check_point(point)?;
    Ok(g_vector(&point.context, point.dosage))
}

pub fn build_f(point: &DecisionPoint) -> Result<FVector> {
    check_point(point)?;
    Ok(f_vector(&point.context, point.dosage))
}

/// Action-centered `phi = [g; π·f; (A − π)·f]`.
pub fn phi_from_parts(g: &GVector, f: &FVector, action: bool, prob: f64) -> PhiVector {
    let centered = b2f(action) - prob;
    let mut phi = PhiVector::zeros();
    phi.fixed_rows_mut::<G_DIM>(0).copy_from(g);
    phi.fixed_rows_mut::<F_DIM>(G_DIM).copy_from(&(f * prob));
    phi.fixed_rows_mut::<F_DIM>(G_DIM + F_DIM)
        .copy_from(&(f * centered));
    phi
}

/// `phi_tilde = [g; A·f]`.
pub fn phi_tilde_from_parts(g: &GVector, f: &FVector, action: bool) -> PhiTildeVector {
    let mut v = PhiTildeVector::zeros();
    v.fixed_rows_mut::<G_DIM>(0).copy_from(g);
    v.fixed_rows_mut::<F_DIM>(G_DIM)
        .copy_from(&(f * b2f(action)));
    v
}

pub fn build_phi(point: &DecisionPoint, action: bool, prob: f64) -> Result<PhiVector> {
    check_prob(prob)?;
    let g = build_g(point)?;
    let f = f_vector(&point.context, point.dosage);
    Ok(phi_from_parts(&g, &f, action, prob))
}

pub fn build_phi_tilde(point: &DecisionPoint, action: bool) -> Result<PhiTildeVector> {
    let g = build_g(point)?;
    let f = f_vector(&point.context, point.dosage);
    Ok(phi_tilde_from_parts(&g, &f, action))
}

/// One step of the dosage recursion `X_t = λ·X_{t−1} + max(A_{t−1}, B_{t−1})`.
pub fn update_dosage(prev_dosage: f64, prev_action: bool, prev_antised: bool) -> f64 {
    DOSAGE_DECAY * prev_dosage + b2f(prev_action || prev_antised)
}

/// A user's ordered decision points plus the per-day nightly-update log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub points: Vec<DecisionPoint>,
    /// Entry `d − 1` is true when the posterior update ran on the night of day `d`.
    pub update_log: Vec<bool>,
}

impl Trajectory {
    /// Validates the points and derives the nightly-update log from availability.
    pub fn new(user_id: impl Into<String>, points: Vec<DecisionPoint>) -> Result<Self> {
        let user_id = user_id.into();
        let update_log = nightly_update_log(points.iter().map(|p| p.available));
        let traj = Self {
            user_id,
            points,
            update_log,
        };
        traj.validate()?;
        Ok(traj)
    }

    /// Like [`Trajectory::new`], but first overwrites every dosage with the
    /// recursion from `X_1 = 0` over the recorded actions and anti-sedentary flags.
    pub fn with_recomputed_dosage(
        user_id: impl Into<String>,
        mut points: Vec<DecisionPoint>,
    ) -> Result<Self> {
        recompute_dosage(&mut points);
        Self::new(user_id, points)
    }

    pub fn horizon(&self) -> usize {
        self.points.len()
    }

    pub fn days(&self) -> usize {
        days_for(self.horizon())
    }

    fn invalid(&self, reason: String) -> Error {
        Error::InvalidTrajectory {
            user_id: self.user_id.clone(),
            reason,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&DecisionPoint> = None;
        for (i, p) in self.points.iter().enumerate() {
            if p.t != i + 1 {
                return Err(self.invalid(format!(
                    "decision times must be contiguous from 1; found t={} at position {}",
                    p.t,
                    i + 1
                )));
            }
            if p.day != day_of(p.t) {
                return Err(self.invalid(format!("t={} has day {}, expected {}", p.t, p.day, day_of(p.t))));
            }
            p.context.check_finite(p.t)?;
            if !p.available && p.treated() {
                return Err(self.invalid(format!("t={} is treated while unavailable", p.t)));
            }
            if let Some(pr) = p.action_prob {
                if !(0.0..=1.0).contains(&pr) {
                    return Err(self.invalid(format!("t={} has probability {pr}", p.t)));
                }
            }
            if let Some(r) = p.reward {
                if !r.is_finite() {
                    return Err(self.invalid(format!("t={} has a non-finite reward", p.t)));
                }
            }
            if !(0.0..=DOSAGE_MAX).contains(&p.dosage) {
                return Err(self.invalid(format!("t={} has dosage {} outside [0, 20]", p.t, p.dosage)));
            }
            let expected = match prev {
                None => 0.0,
                Some(q) => update_dosage(q.dosage, q.treated(), q.anti_sedentary),
            };
            if (p.dosage - expected).abs() > 1e-6 {
                return Err(self.invalid(format!(
                    "t={} dosage {} breaks the recursion (expected {expected})",
                    p.t, p.dosage
                )));
            }
            prev = Some(p);
        }
        if self.update_log.len() != self.days() {
            return Err(self.invalid(format!(
                "update log has {} entries for {} days",
                self.update_log.len(),
                self.days()
            )));
        }
        Ok(())
    }
}

/// Rewrites dosage in place, starting from `X_1 = λ·0 + max(A_0, B_0) = 0`.
pub fn recompute_dosage(points: &mut [DecisionPoint]) {
    let mut dosage = 0.0;
    let mut carry = false;
    for (i, p) in points.iter_mut().enumerate() {
        if i > 0 {
            dosage = update_dosage(dosage, carry, false);
        }
        p.dosage = dosage;
        carry = p.treated() || p.anti_sedentary;
    }
}

/// Nightly-update guard: the night of day `d` runs an update when the day is
/// complete (its 5th decision time exists) and at least one of its decision
/// times was available.
pub fn nightly_update_log(availability: impl IntoIterator<Item = bool>) -> Vec<bool> {
    let avail: Vec<bool> = availability.into_iter().collect();
    (0..days_for(avail.len()))
        .map(|d| {
            let lo = d * SLOTS_PER_DAY;
            let hi = lo + SLOTS_PER_DAY;
            hi <= avail.len() && avail[lo..hi].iter().any(|&a| a)
        })
        .collect()
}
