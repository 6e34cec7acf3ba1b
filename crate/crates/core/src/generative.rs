//! ParaSim: rerun the Thompson-sampling algorithm on a user's frozen
//! exogenous stream `(I_t, Z_t, B_t, ε̂_t)` under a chosen ground-truth
//! reward model.
//!
//! The same driver also replays the algorithm over observed data (to recover
//! the forecasts the algorithm made) and generates synthetic trials.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    beta_marginal, posterior_update, DayObservation, FMatrix, FittedModel, PosteriorState, Prior,
    RewardFit,
};
use crate::error::{Error, Result};
use crate::model::{
    day_of, f_vector, g_vector, nightly_update_log, phi_from_parts, update_dosage,
    ContextFeatures, DecisionPoint, FVector, Feature, GVector, Trajectory, F_DIM, G_DIM,
    SLOTS_PER_DAY,
};
use crate::policy::{
    action_probability, eta_evaluate, sample_action, standardized_advantage, ThresholdPolicy,
};

pub const DEFAULT_WARMUP_DAYS: usize = 7;
pub const DEFAULT_WARMUP_PROB: f64 = 0.25;

/// Settings of the algorithm being rerun.
#[derive(Debug, Clone)]
pub struct AlgorithmConfig {
    /// Initial prior; `noise_var` is the working-model σ².
    pub prior: Prior,
    pub eta0: ThresholdPolicy,
    /// Days with a constant treatment probability before Thompson sampling starts.
    pub warmup_days: usize,
    pub warmup_prob: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            prior: Prior::default(),
            eta0: ThresholdPolicy::default(),
            warmup_days: DEFAULT_WARMUP_DAYS,
            warmup_prob: DEFAULT_WARMUP_PROB,
        }
    }
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if !(0.0..=1.0).contains(&self.warmup_prob) {
            return Err(Error::InvalidProbability(self.warmup_prob));
        }
        Ok(())
    }

    fn warmup_end(&self) -> usize {
        self.warmup_days * SLOTS_PER_DAY
    }
}

/// The parts of a decision time that ParaSim holds fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogenousPoint {
    pub t: usize,
    pub available: bool,
    pub context: ContextFeatures,
    pub anti_sedentary: bool,
    /// Reward or state unobserved at an available time.
    pub missing: bool,
}

impl From<&DecisionPoint> for ExogenousPoint {
    fn from(p: &DecisionPoint) -> Self {
        Self {
            t: p.t,
            available: p.available,
            context: p.context,
            anti_sedentary: p.anti_sedentary,
            missing: p.available && !p.usable(),
        }
    }
}

/// Frozen generative model for one user.
#[derive(Debug, Clone)]
pub struct GroundTruthModel {
    pub user_id: String,
    pub exogenous: Vec<ExogenousPoint>,
    /// `ε̂_t`, present exactly at available, non-missing times.
    pub residuals: Vec<Option<f64>>,
    /// Mean-reward coefficients `(α, β)`.
    pub coefficients: RewardFit,
    pub algorithm: AlgorithmConfig,
}

impl GroundTruthModel {
    pub fn horizon(&self) -> usize {
        self.exogenous.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTrajectory {
            user_id: self.user_id.clone(),
            reason,
        };
        if self.residuals.len() != self.exogenous.len() {
            return Err(Error::DimensionMismatch {
                expected: self.exogenous.len(),
                got: self.residuals.len(),
            });
        }
        for (x, e) in self.exogenous.iter().zip(&self.residuals) {
            let needs = x.available && !x.missing;
            if needs != e.is_some() {
                return Err(bad(format!("residual presence mismatch at t={}", x.t)));
            }
            if e.is_some_and(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite residual at t={}", x.t)));
            }
        }
        if self.algorithm.warmup_end() > self.horizon() {
            return Err(bad(format!(
                "warmup of {} days exceeds the horizon of {} decision times",
                self.algorithm.warmup_days,
                self.horizon()
            )));
        }
        self.algorithm.validate()
    }

    /// Zeroes `β` entirely: no advantage in any state.
    pub fn null_advantage(mut self) -> Self {
        self.coefficients.beta = FVector::zeros();
        self
    }

    /// Zeroes the coordinate of `β` for `feature`, keeping the rest.
    pub fn null_feature(mut self, feature: Feature) -> Self {
        self.coefficients.beta[feature.f_index()] = 0.0;
        self
    }
}

impl RewardFit {
    /// Builds coefficients from plain slices, checking their lengths.
    pub fn from_slices(alpha: &[f64], beta: &[f64]) -> Result<Self> {
        if alpha.len() != G_DIM {
            return Err(Error::DimensionMismatch {
                expected: G_DIM,
                got: alpha.len(),
            });
        }
        if beta.len() != F_DIM {
            return Err(Error::DimensionMismatch {
                expected: F_DIM,
                got: beta.len(),
            });
        }
        Ok(Self {
            alpha: GVector::from_column_slice(alpha),
            beta: FVector::from_column_slice(beta),
        })
    }
}

/// `ε̂_t = R_t − α̂ᵀg(S_t) − A_t·β̂ᵀf(S_t)` at every available, non-missing time.
pub fn compute_residuals(traj: &Trajectory, fit: &RewardFit) -> Result<Vec<Option<f64>>> {
    traj.points
        .iter()
        .map(|p| {
            if !p.usable() {
                return Ok(None);
            }
            let g = crate::model::build_g(p)?;
            let f = f_vector(&p.context, p.dosage);
            Ok(p.reward.map(|r| r - fit.mean_reward(&g, &f, p.treated())))
        })
        .collect()
}

/// Ground truth with the fitted `(α̂, β̂)` and the fit's residuals.
pub fn make_fitted_model(
    traj: &Trajectory,
    fitted: &FittedModel,
    algorithm: &AlgorithmConfig,
) -> Result<GroundTruthModel> {
    let mut algorithm = algorithm.clone();
    algorithm.prior.noise_var = fitted.noise_var;
    let model = GroundTruthModel {
        user_id: traj.user_id.clone(),
        exogenous: traj.points.iter().map(ExogenousPoint::from).collect(),
        residuals: compute_residuals(traj, &fitted.fit)?,
        coefficients: fitted.fit,
        algorithm,
    };
    model.validate()?;
    Ok(model)
}

/// `α = α̂, β = 0`.
pub fn make_null_advantage_model(
    traj: &Trajectory,
    fitted: &FittedModel,
    algorithm: &AlgorithmConfig,
) -> Result<GroundTruthModel> {
    Ok(make_fitted_model(traj, fitted, algorithm)?.null_advantage())
}

/// `α = α̂`, `β_v = 0`, other coordinates of `β` from the fit.
pub fn make_null_feature_model(
    traj: &Trajectory,
    fitted: &FittedModel,
    algorithm: &AlgorithmConfig,
    feature: Feature,
) -> Result<GroundTruthModel> {
    Ok(make_fitted_model(traj, fitted, algorithm)?.null_feature(feature))
}

/// One decision time of a rerun trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub t: usize,
    pub available: bool,
    pub context: ContextFeatures,
    pub anti_sedentary: bool,
    pub dosage: f64,
    pub action: bool,
    /// Treatment probability used (available times only).
    pub prob: Option<f64>,
    /// Reward; absent when unavailable or when the observed point was missing.
    pub reward: Option<f64>,
    /// Standardized advantage forecast `Δ̂_t(S_t)` (available times only).
    pub advantage: Option<f64>,
}

/// The β marginal and threshold in effect during one day.
#[derive(Debug, Clone)]
pub struct BetaSnapshot {
    pub mu: FVector,
    pub sigma: FMatrix,
    pub eta: ThresholdPolicy,
}

impl BetaSnapshot {
    fn of(state: &PosteriorState) -> Self {
        let (mu, sigma) = beta_marginal(state);
        Self {
            mu,
            sigma,
            eta: state.eta.clone(),
        }
    }

    /// `Δ̂` for a context/dosage under this day's posterior.
    pub fn advantage(&self, ctx: &ContextFeatures, dosage: f64) -> Result<f64> {
        let f = f_vector(ctx, dosage);
        standardized_advantage(&self.mu, &self.sigma, &f, eta_evaluate(&self.eta, dosage))
    }
}

/// Output of one algorithm run.
#[derive(Debug, Clone)]
pub struct ResampledTrajectory {
    pub user_id: String,
    pub points: Vec<SimPoint>,
    /// Entry `d − 1` is in effect during day `d`.
    pub beta_snapshots: Vec<BetaSnapshot>,
    /// Full posteriors per day; filled only when requested.
    pub posterior_snapshots: Vec<PosteriorState>,
    pub update_log: Vec<bool>,
    /// Uniform draws consumed from the caller's stream.
    pub draws: u64,
}

impl ResampledTrajectory {
    pub fn days(&self) -> usize {
        self.beta_snapshots.len()
    }
}

struct Decision {
    g: GVector,
    f: FVector,
    /// Probability the algorithm assigns (warmup constant or `h(Φ(Δ̂))`).
    policy_prob: f64,
}

struct Outcome {
    action: bool,
    /// Probability entering the action-centered features.
    prob: f64,
    reward: Option<f64>,
}

fn annotate(t: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Simulation {
        t,
        day: day_of(t),
        source: Box::new(e),
    }
}

/// The nightly-update Thompson-sampling loop shared by resampling, replay,
/// and synthetic generation. `decide` is called at available times only.
fn drive<F>(
    user_id: &str,
    exogenous: &[ExogenousPoint],
    algo: &AlgorithmConfig,
    keep_posteriors: bool,
    mut decide: F,
) -> Result<ResampledTrajectory>
where
    F: FnMut(usize, &Decision) -> Result<Outcome>,
{
    let horizon = exogenous.len();
    let mut state = PosteriorState::from_prior(&algo.prior, algo.eta0.clone());
    let mut snapshot = BetaSnapshot::of(&state);
    let mut beta_snapshots = Vec::with_capacity(horizon.div_ceil(SLOTS_PER_DAY));
    let mut posterior_snapshots = Vec::new();
    let mut points = Vec::with_capacity(horizon);
    let mut batch: Vec<DayObservation> = Vec::with_capacity(SLOTS_PER_DAY);
    let warmup_end = algo.warmup_end();

    let mut dosage = 0.0;
    let mut prev_action = false;
    let mut prev_antised = false;

    for (i, x) in exogenous.iter().enumerate() {
        let t = i + 1;
        if (t - 1) % SLOTS_PER_DAY == 0 {
            beta_snapshots.push(snapshot.clone());
            if keep_posteriors {
                posterior_snapshots.push(state.clone());
            }
        }
        if i > 0 {
            dosage = update_dosage(dosage, prev_action, prev_antised);
        }
        let g = g_vector(&x.context, dosage);
        let f = f_vector(&x.context, dosage);

        let mut sim = SimPoint {
            t,
            available: x.available,
            context: x.context,
            anti_sedentary: x.anti_sedentary,
            dosage,
            action: false,
            prob: None,
            reward: None,
            advantage: None,
        };
        if x.available {
            let eta = eta_evaluate(&snapshot.eta, dosage);
            let advantage = standardized_advantage(&snapshot.mu, &snapshot.sigma, &f, eta)
                .map_err(annotate(t))?;
            let policy_prob = if t <= warmup_end {
                algo.warmup_prob
            } else {
                action_probability(advantage)
            };
            let out = decide(i, &Decision { g, f, policy_prob })?;
            sim.action = out.action;
            sim.prob = Some(out.prob);
            sim.reward = out.reward;
            sim.advantage = Some(advantage);
            if let (false, Some(reward)) = (x.missing, out.reward) {
                batch.push(DayObservation {
                    phi: phi_from_parts(&g, &f, out.action, out.prob),
                    reward,
                    available: true,
                });
            }
        }
        points.push(sim);

        if t % SLOTS_PER_DAY == 0 {
            let any_available = exogenous[t - SLOTS_PER_DAY..t].iter().any(|p| p.available);
            if any_available {
                state = posterior_update(&state, &algo.prior, &batch).map_err(annotate(t))?;
                snapshot = BetaSnapshot::of(&state);
            }
            batch.clear();
        }
        prev_action = sim.action;
        prev_antised = x.anti_sedentary;
    }

    Ok(ResampledTrajectory {
        user_id: user_id.to_string(),
        points,
        beta_snapshots,
        posterior_snapshots,
        update_log: nightly_update_log(exogenous.iter().map(|p| p.available)),
        draws: 0,
    })
}

/// Resamples one trajectory: fresh actions from `rng`, rewards
/// `αᵀg + A·βᵀf + ε̂_t`, dosage recomputed from `X_0 = 0`.
pub fn parasim_run<R: Rng + ?Sized>(
    model: &GroundTruthModel,
    rng: &mut R,
) -> Result<ResampledTrajectory> {
    parasim_run_with(model, rng, false)
}

/// [`parasim_run`] optionally retaining every day's full posterior.
pub fn parasim_run_with<R: Rng + ?Sized>(
    model: &GroundTruthModel,
    rng: &mut R,
    keep_posteriors: bool,
) -> Result<ResampledTrajectory> {
    let mut draws = 0u64;
    let coef = model.coefficients;
    let mut out = drive(
        &model.user_id,
        &model.exogenous,
        &model.algorithm,
        keep_posteriors,
        |i, d| {
            draws += 1;
            let action = sample_action(d.policy_prob, rng);
            let reward = model.residuals[i].map(|e| coef.mean_reward(&d.g, &d.f, action) + e);
            Ok(Outcome {
                action,
                prob: d.policy_prob,
                reward,
            })
        },
    )?;
    out.draws = draws;
    Ok(out)
}

/// Replays the algorithm over observed actions and rewards, recovering the
/// daily posteriors and forecasts it produced. Recorded probabilities are
/// used in the action-centered features; absent ones are recomputed.
pub fn replay_observed(
    traj: &Trajectory,
    algo: &AlgorithmConfig,
    keep_posteriors: bool,
) -> Result<ResampledTrajectory> {
    let exogenous: Vec<ExogenousPoint> = traj.points.iter().map(ExogenousPoint::from).collect();
    drive(&traj.user_id, &exogenous, algo, keep_posteriors, |i, d| {
        let p = &traj.points[i];
        Ok(Outcome {
            action: p.treated(),
            prob: p.action_prob.unwrap_or(d.policy_prob),
            reward: if p.usable() { p.reward } else { None },
        })
    })
}

/// Environment side of the general resampling loop.
pub trait Environment {
    type State: Clone;

    fn horizon(&self) -> usize;
    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;
    /// `r_t(s, a)`; `None` when no reward is generated at this time.
    fn mean_reward(&self, t: usize, state: &Self::State, action: bool) -> Option<f64>;
    /// `ε_t ~ Q_t`.
    fn noise<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> f64;
    /// `S_{t+1} ~ P_t(· | s, a)`.
    fn transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        state: &Self::State,
        action: bool,
        rng: &mut R,
    ) -> Self::State;
}

/// Learning side of the general resampling loop.
pub trait Algorithm<S> {
    /// `π_t(1 | s)`; `None` when no randomization happens (action is 0).
    fn action_probability(&mut self, t: usize, state: &S) -> Result<Option<f64>>;
    /// Feed back one step and update the policy.
    fn observe(
        &mut self,
        t: usize,
        state: &S,
        action: bool,
        prob: Option<f64>,
        reward: Option<f64>,
    ) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenericStep<S> {
    pub t: usize,
    pub state: S,
    pub action: bool,
    pub prob: Option<f64>,
    pub reward: Option<f64>,
}

/// General ParaSim: `S_1 ~ ρ_1`; for each t sample `A ~ π_t`, emit
/// `R = r_t + ε`, move `S' ~ P_t`, and update the algorithm.
pub fn parasim_generic<E, A, R>(
    env: &E,
    algorithm: &mut A,
    rng: &mut R,
) -> Result<Vec<GenericStep<E::State>>>
where
    E: Environment,
    A: Algorithm<E::State>,
    R: Rng + ?Sized,
{
    let horizon = env.horizon();
    let mut steps = Vec::with_capacity(horizon);
    if horizon == 0 {
        return Ok(steps);
    }
    let mut state = env.initial_state(rng);
    for t in 1..=horizon {
        let prob = algorithm.action_probability(t, &state)?;
        let action = match prob {
            Some(p) => sample_action(p, rng),
            None => false,
        };
        let reward = env
            .mean_reward(t, &state, action)
            .map(|m| m + env.noise(t, rng));
        algorithm.observe(t, &state, action, prob, reward)?;
        let next = if t < horizon {
            Some(env.transition(t, &state, action, rng))
        } else {
            None
        };
        steps.push(GenericStep {
            t,
            state: state.clone(),
            action,
            prob,
            reward,
        });
        if let Some(n) = next {
            state = n;
        }
    }
    Ok(steps)
}

/// State of the HeartSteps instantiation of [`parasim_generic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartStepsState {
    pub t: usize,
    pub dosage: f64,
}

/// [`Environment`] with exogenous features fixed at their recorded values
/// (a point mass on the recorded next state, up to dosage) and noise replayed
/// from the residuals.
pub struct HeartStepsEnvironment<'a> {
    pub model: &'a GroundTruthModel,
}

impl Environment for HeartStepsEnvironment<'_> {
    type State = HeartStepsState;

    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn initial_state<R: Rng + ?Sized>(&self, _rng: &mut R) -> HeartStepsState {
        HeartStepsState { t: 1, dosage: 0.0 }
    }

    fn mean_reward(&self, t: usize, s: &HeartStepsState, action: bool) -> Option<f64> {
        let x = &self.model.exogenous[t - 1];
        if !x.available || self.model.residuals[t - 1].is_none() {
            return None;
        }
        let g = g_vector(&x.context, s.dosage);
        let f = f_vector(&x.context, s.dosage);
        Some(self.model.coefficients.mean_reward(&g, &f, action))
    }

    fn noise<R: Rng + ?Sized>(&self, t: usize, _rng: &mut R) -> f64 {
        self.model.residuals[t - 1].unwrap_or(0.0)
    }

    fn transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        s: &HeartStepsState,
        action: bool,
        _rng: &mut R,
    ) -> HeartStepsState {
        let b = self.model.exogenous[t - 1].anti_sedentary;
        HeartStepsState {
            t: t + 1,
            dosage: update_dosage(s.dosage, action, b),
        }
    }
}

/// [`Algorithm`] running warmup-then-Thompson-sampling with nightly updates.
pub struct ThompsonAgent<'a> {
    exogenous: &'a [ExogenousPoint],
    algo: &'a AlgorithmConfig,
    state: PosteriorState,
    snapshot: BetaSnapshot,
    batch: Vec<DayObservation>,
}

impl<'a> ThompsonAgent<'a> {
    pub fn new(exogenous: &'a [ExogenousPoint], algo: &'a AlgorithmConfig) -> Self {
        let state = PosteriorState::from_prior(&algo.prior, algo.eta0.clone());
        let snapshot = BetaSnapshot::of(&state);
        Self {
            exogenous,
            algo,
            state,
            snapshot,
            batch: Vec::new(),
        }
    }

    pub fn posterior(&self) -> &PosteriorState {
        &self.state
    }
}

impl Algorithm<HeartStepsState> for ThompsonAgent<'_> {
    fn action_probability(&mut self, t: usize, s: &HeartStepsState) -> Result<Option<f64>> {
        let x = &self.exogenous[t - 1];
        if !x.available {
            return Ok(None);
        }
        if t <= self.algo.warmup_end() {
            return Ok(Some(self.algo.warmup_prob));
        }
        let adv = self.snapshot.advantage(&x.context, s.dosage).map_err(annotate(t))?;
        Ok(Some(action_probability(adv)))
    }

    fn observe(
        &mut self,
        t: usize,
        s: &HeartStepsState,
        action: bool,
        prob: Option<f64>,
        reward: Option<f64>,
    ) -> Result<()> {
        let x = &self.exogenous[t - 1];
        if let (true, false, Some(p), Some(r)) = (x.available, x.missing, prob, reward) {
            let g = g_vector(&x.context, s.dosage);
            let f = f_vector(&x.context, s.dosage);
            self.batch.push(DayObservation {
                phi: phi_from_parts(&g, &f, action, p),
                reward: r,
                available: true,
            });
        }
        if t % SLOTS_PER_DAY == 0 {
            if self.exogenous[t - SLOTS_PER_DAY..t].iter().any(|p| p.available) {
                self.state = posterior_update(&self.state, &self.algo.prior, &self.batch)
                    .map_err(annotate(t))?;
                self.snapshot = BetaSnapshot::of(&self.state);
            }
            self.batch.clear();
        }
        Ok(())
    }
}
