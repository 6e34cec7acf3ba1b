//! Resampling audit over a cohort.
//!
//! Simulation and scoring are split: [`simulate`] runs every `(user, b)` unit
//! once and keeps only each run's [`ScoreSummary`]; [`summarize`] turns the
//! stored summaries into counts, percentiles, per-user fractions and
//! `(δ, γ)` grids without touching a random stream again.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{fit_with_noise_estimate, FittedModel};
use crate::error::{Error, Result};
use crate::generative::{
    make_fitted_model, parasim_run_with, replay_observed, AlgorithmConfig, GroundTruthModel,
    ResampledTrajectory,
};
use crate::interestingness::{
    score_summary, validate_delta, validate_gamma, Classification, ScoreConfig, ScoreSummary,
};
use crate::model::{Feature, Trajectory};
use crate::rng::resample_stream;

pub const DEFAULT_RESAMPLES: usize = 500;

/// Which part of the fitted advantage is removed in the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroundTruthKind {
    #[default]
    NullAdvantage,
    NullFeature(Feature),
}

impl GroundTruthKind {
    pub fn apply(self, model: GroundTruthModel) -> GroundTruthModel {
        match self {
            GroundTruthKind::NullAdvantage => model.null_advantage(),
            GroundTruthKind::NullFeature(f) => model.null_feature(f),
        }
    }
}

impl fmt::Display for GroundTruthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroundTruthKind::NullAdvantage => f.write_str("null-advantage"),
            GroundTruthKind::NullFeature(feat) => write!(f, "null-feature:{feat}"),
        }
    }
}

impl FromStr for GroundTruthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "null-advantage" {
            return Ok(GroundTruthKind::NullAdvantage);
        }
        match s.strip_prefix("null-feature:") {
            Some(name) => Ok(GroundTruthKind::NullFeature(name.parse()?)),
            None => Err(Error::InvalidConfig(format!(
                "unknown ground truth {s:?}; expected null-advantage or null-feature:<name>"
            ))),
        }
    }
}

impl Serialize for GroundTruthKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroundTruthKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub ground_truth: GroundTruthKind,
    pub resamples: usize,
    pub master_seed: u64,
    pub score: ScoreConfig,
    pub delta_grid: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub algorithm: AlgorithmConfig,
    /// Fixed σ² instead of the per-user residual estimate.
    pub noise_var: Option<f64>,
    /// Keep every resampled trajectory (with full posteriors) in the result.
    pub keep_runs: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            ground_truth: GroundTruthKind::NullAdvantage,
            resamples: DEFAULT_RESAMPLES,
            master_seed: 0,
            score: ScoreConfig::default(),
            delta_grid: None,
            gamma_grid: None,
            workers: 1,
            algorithm: AlgorithmConfig::default(),
            noise_var: None,
            keep_runs: false,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(Error::InvalidConfig("resamples must be at least 1".into()));
        }
        self.score.validate()?;
        self.algorithm.validate()?;
        if let Some(v) = self.noise_var {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("noise_var = {v} must be positive")));
            }
        }
        for (name, grid) in [("delta_grid", &self.delta_grid), ("gamma_grid", &self.gamma_grid)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return Err(Error::InvalidConfig(format!("{name} is empty")));
                }
            }
        }
        for &d in self.delta_grid.iter().flatten() {
            validate_delta(d)?;
        }
        for &g in self.gamma_grid.iter().flatten() {
            validate_gamma(g)?;
        }
        Ok(())
    }

    pub fn wants_grid(&self) -> bool {
        self.delta_grid.is_some() || self.gamma_grid.is_some()
    }

    fn grid_axes(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.delta_grid.clone().unwrap_or_else(|| vec![self.score.delta]),
            self.gamma_grid.clone().unwrap_or_else(|| vec![self.score.gamma]),
        )
    }
}

/// One user's inputs; missing fits and observed scores are computed.
#[derive(Debug, Clone, Copy)]
pub struct UserInput<'a> {
    pub trajectory: &'a Trajectory,
    pub fitted: Option<&'a FittedModel>,
    pub observed: Option<ScoreSummary>,
}

impl<'a> From<&'a Trajectory> for UserInput<'a> {
    fn from(trajectory: &'a Trajectory) -> Self {
        Self {
            trajectory,
            fitted: None,
            observed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedUser {
    pub user_id: String,
    pub reason: String,
}

/// Stored output of the simulation stage for one included user.
#[derive(Debug, Clone)]
pub struct UserResamples {
    pub user_id: String,
    pub fitted: FittedModel,
    pub observed: ScoreSummary,
    /// Length `B`, indexed by resample.
    pub resamples: Vec<ScoreSummary>,
    /// Filled only when `keep_runs` is set.
    pub runs: Vec<ResampledTrajectory>,
}

#[derive(Debug, Clone)]
pub struct Resamples {
    pub resamples: usize,
    pub users: Vec<UserResamples>,
    pub excluded: Vec<ExcludedUser>,
    /// Number of `parasim_run` calls made.
    pub runs_executed: u64,
    /// Uniform draws consumed across all runs.
    pub rng_draws: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub numint: usize,
    pub numint_plus: usize,
    pub numint_minus: usize,
}

impl TrialCounts {
    fn add(&mut self, c: Classification) {
        self.numint += usize::from(c.interesting);
        self.numint_plus += usize::from(c.plus);
        self.numint_minus += usize::from(c.minus);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user_id: String,
    pub observed_score: Option<f64>,
    pub eligible: bool,
    pub interesting: bool,
    pub interesting_plus: bool,
    pub interesting_minus: bool,
    pub lval: Option<f64>,
    /// Resamples in which the user was eligible.
    pub eligible_resamples: usize,
    /// Eligibility differed between resamples.
    pub eligibility_varies: bool,
    /// Why `lval` is absent for an eligible user.
    pub lval_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub delta: f64,
    pub gamma: f64,
    pub observed: TrialCounts,
    pub fraction: f64,
    pub trials: Vec<TrialCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub delta: f64,
    pub gamma: f64,
    pub trials: Vec<TrialCounts>,
    pub observed: TrialCounts,
    pub count_percentile: f64,
    pub count_percentile_plus: f64,
    pub count_percentile_minus: f64,
    pub users: Vec<UserReport>,
    pub grid: Option<Vec<GridCell>>,
    pub excluded: Vec<ExcludedUser>,
    pub runs_executed: u64,
    pub rng_draws: u64,
}

/// `(1/B) Σ_b 1(observed ≤ trial_b)`.
pub fn count_percentile(observed: usize, trial_counts: &[usize]) -> Result<f64> {
    if trial_counts.is_empty() {
        return Err(Error::EmptyInput("trial counts"));
    }
    let hits = trial_counts.iter().filter(|&&c| observed <= c).count();
    Ok(hits as f64 / trial_counts.len() as f64)
}

/// `(1/B') Σ_b 1(|s_obs − 0.5| ≤ |s_b − 0.5|)` over the `B'` usable resamples.
pub fn user_lval(user_id: &str, observed_score: f64, resampled_scores: &[f64]) -> Result<f64> {
    if resampled_scores.is_empty() {
        return Err(Error::NoUsableResamples {
            user_id: user_id.to_string(),
        });
    }
    let obs = (observed_score - 0.5).abs();
    let hits = resampled_scores.iter().filter(|&&s| obs <= (s - 0.5).abs()).count();
    Ok(hits as f64 / resampled_scores.len() as f64)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Scores the forecasts the algorithm produced on the observed data, replayed
/// with the fitted σ².
pub fn observed_summary(
    traj: &Trajectory,
    fitted: &FittedModel,
    algorithm: &AlgorithmConfig,
    score: &ScoreConfig,
) -> Result<ScoreSummary> {
    let mut algorithm = algorithm.clone();
    algorithm.prior.noise_var = fitted.noise_var;
    let replay = replay_observed(traj, &algorithm, false)?;
    score_summary(&replay, score.kind, score.smoothing)
}

struct Prepared {
    model: GroundTruthModel,
    fitted: FittedModel,
    observed: ScoreSummary,
}

fn prepare(input: &UserInput<'_>, config: &StudyConfig) -> Result<Prepared> {
    let traj = input.trajectory;
    let fitted = match input.fitted {
        Some(f) => f.clone(),
        None => fit_with_noise_estimate(traj, &config.algorithm.prior, config.noise_var)?,
    };
    let model = config
        .ground_truth
        .apply(make_fitted_model(traj, &fitted, &config.algorithm)?);
    let observed = match input.observed {
        Some(s) => s,
        None => observed_summary(traj, &fitted, &config.algorithm, &config.score)?,
    };
    Ok(Prepared {
        model,
        fitted,
        observed,
    })
}

struct Unit {
    summary: ScoreSummary,
    draws: u64,
    run: Option<ResampledTrajectory>,
}

fn run_unit(model: &GroundTruthModel, config: &StudyConfig, b: usize) -> Result<Unit> {
    let mut rng = resample_stream(config.master_seed, &model.user_id, b as u64);
    let run = parasim_run_with(model, &mut rng, config.keep_runs)?;
    let summary = score_summary(&run, config.score.kind, config.score.smoothing)?;
    Ok(Unit {
        summary,
        draws: run.draws,
        run: config.keep_runs.then_some(run),
    })
}

/// Runs `B` resamples per user. Users whose fit, ground truth or any
/// resample fails are excluded with the reason.
pub fn simulate(users: &[UserInput<'_>], config: &StudyConfig) -> Result<Resamples> {
    config.validate()?;
    let mut seen = HashSet::new();
    for u in users {
        if !seen.insert(u.trajectory.user_id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate user id {:?}",
                u.trajectory.user_id
            )));
        }
    }
    let b_count = config.resamples;
    let pool = pool(config.workers)?;
    pool.install(|| {
        let prepared: Vec<Result<Prepared>> =
            users.par_iter().map(|u| prepare(u, config)).collect();

        let ready: Vec<&Prepared> = prepared.iter().filter_map(|p| p.as_ref().ok()).collect();
        let units: Vec<Result<Unit>> = (0..ready.len() * b_count)
            .into_par_iter()
            .map(|k| run_unit(&ready[k / b_count].model, config, k % b_count))
            .collect();

        let mut out = Resamples {
            resamples: b_count,
            users: Vec::new(),
            excluded: Vec::new(),
            runs_executed: units.len() as u64,
            rng_draws: 0,
        };
        let mut units = units.into_iter();
        for (input, prep) in users.iter().zip(prepared) {
            let user_id = input.trajectory.user_id.clone();
            let prep = match prep {
                Ok(p) => p,
                Err(e) => {
                    out.excluded.push(ExcludedUser {
                        user_id,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            let mut resamples = Vec::with_capacity(b_count);
            let mut runs = Vec::new();
            let mut failure = None;
            for unit in units.by_ref().take(b_count) {
                match unit {
                    Ok(u) => {
                        out.rng_draws += u.draws;
                        resamples.push(u.summary);
                        runs.extend(u.run);
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = failure {
                out.excluded.push(ExcludedUser {
                    user_id,
                    reason: e.to_string(),
                });
                continue;
            }
            out.users.push(UserResamples {
                user_id,
                fitted: prep.fitted,
                observed: prep.observed,
                resamples,
                runs,
            });
        }
        Ok(out)
    })
}

fn counts_at(data: &Resamples, delta: f64, gamma: f64) -> (TrialCounts, Vec<TrialCounts>) {
    let mut observed = TrialCounts::default();
    let mut trials = vec![TrialCounts::default(); data.resamples];
    for user in &data.users {
        if let Some(c) = user.observed.classify(delta, gamma) {
            observed.add(c);
        }
        for (trial, s) in trials.iter_mut().zip(&user.resamples) {
            if let Some(c) = s.classify(delta, gamma) {
                trial.add(c);
            }
        }
    }
    (observed, trials)
}

fn percentile_of(observed: usize, trials: &[TrialCounts], pick: fn(&TrialCounts) -> usize) -> Result<f64> {
    let counts: Vec<usize> = trials.iter().map(pick).collect();
    count_percentile(observed, &counts)
}

/// Rescores stored resamples on every `(δ, γ)` pair, deltas outermost.
pub fn stability_grid(data: &Resamples, deltas: &[f64], gammas: &[f64]) -> Result<Vec<GridCell>> {
    if deltas.is_empty() || gammas.is_empty() {
        return Err(Error::EmptyInput("stability grid"));
    }
    let mut cells = Vec::with_capacity(deltas.len() * gammas.len());
    for &delta in deltas {
        validate_delta(delta)?;
        for &gamma in gammas {
            validate_gamma(gamma)?;
            let (observed, trials) = counts_at(data, delta, gamma);
            let fraction = percentile_of(observed.numint, &trials, |c| c.numint)?;
            cells.push(GridCell {
                delta,
                gamma,
                observed,
                fraction,
                trials,
            });
        }
    }
    Ok(cells)
}

fn user_report(user: &UserResamples, delta: f64, gamma: f64) -> UserReport {
    let observed_score = user.observed.score;
    let eligible = user.observed.eligible(gamma);
    let class = user.observed.classify(delta, gamma).unwrap_or_default();
    let usable: Vec<f64> = user
        .resamples
        .iter()
        .filter_map(|s| s.eligible_score(gamma))
        .collect();
    let eligibility_varies = !usable.is_empty() && usable.len() < user.resamples.len();
    let (lval, lval_error) = match user.observed.eligible_score(gamma) {
        Some(s) => match user_lval(&user.user_id, s, &usable) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, None),
    };
    UserReport {
        user_id: user.user_id.clone(),
        observed_score,
        eligible,
        interesting: class.interesting,
        interesting_plus: class.plus,
        interesting_minus: class.minus,
        lval,
        eligible_resamples: usable.len(),
        eligibility_varies,
        lval_error,
    }
}

/// Counts, percentiles and per-user fractions at the configured `(δ, γ)`,
/// plus the stability grid when requested.
pub fn summarize(data: &Resamples, config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let (delta, gamma) = (config.score.delta, config.score.gamma);
    let (observed, trials) = counts_at(data, delta, gamma);
    let grid = if config.wants_grid() {
        let (deltas, gammas) = config.grid_axes();
        Some(stability_grid(data, &deltas, &gammas)?)
    } else {
        None
    };
    Ok(StudyResult {
        delta,
        gamma,
        count_percentile: percentile_of(observed.numint, &trials, |c| c.numint)?,
        count_percentile_plus: percentile_of(observed.numint_plus, &trials, |c| c.numint_plus)?,
        count_percentile_minus: percentile_of(observed.numint_minus, &trials, |c| c.numint_minus)?,
        trials,
        observed,
        users: data.users.iter().map(|u| user_report(u, delta, gamma)).collect(),
        grid,
        excluded: data.excluded.clone(),
        runs_executed: data.runs_executed,
        rng_draws: data.rng_draws,
    })
}

/// [`simulate`] followed by [`summarize`].
pub fn run_study(users: &[Trajectory], config: &StudyConfig) -> Result<StudyResult> {
    let inputs: Vec<UserInput<'_>> = users.iter().map(UserInput::from).collect();
    summarize(&simulate(&inputs, config)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextFeatures, DecisionPoint};
    use crate::synth::{generate_trial, SynthSpec};

    #[test]
    fn percentile_examples() {
        assert_eq!(count_percentile(0, &[0, 2, 1]).unwrap(), 1.0);
        assert_eq!(count_percentile(6, &[1, 3, 5]).unwrap(), 0.0);
        assert_eq!(count_percentile(3, &[1, 3, 5, 3]).unwrap(), 0.75);
        assert!(count_percentile(1, &[]).is_err());
    }

    #[test]
    fn lval_examples() {
        assert_eq!(user_lval("u", 0.5, &[0.5, 0.7, 0.2]).unwrap(), 1.0);
        assert_eq!(user_lval("u", 1.0, &[0.2, 0.6, 0.9]).unwrap(), 0.0);
        assert_eq!(user_lval("u", 0.9, &[0.5, 0.95, 0.1, 0.9]).unwrap(), 0.75);
        match user_lval("u7", 0.9, &[]) {
            Err(Error::NoUsableResamples { user_id }) => assert_eq!(user_id, "u7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ground_truth_kind_strings() {
        for s in ["null-advantage", "null-feature:variation", "null-feature:dosage"] {
            assert_eq!(s.parse::<GroundTruthKind>().unwrap().to_string(), s);
        }
        assert!("null-feature:intercept".parse::<GroundTruthKind>().is_err());
        assert!("bogus".parse::<GroundTruthKind>().is_err());
    }

    fn unavailable_user() -> Trajectory {
        let ctx = ContextFeatures::default();
        let mut points: Vec<DecisionPoint> =
            (1..=50).map(|t| DecisionPoint::new(t, false, ctx)).collect();
        for p in &mut points {
            p.action = Some(false);
        }
        Trajectory::new("idle", points).unwrap()
    }

    #[test]
    fn unavailable_user_has_zero_counts() {
        let cfg = StudyConfig {
            resamples: 1,
            ..Default::default()
        };
        let r = run_study(&[unavailable_user()], &cfg).unwrap();
        // no usable points: the fit fails and the user is excluded
        assert_eq!(r.excluded.len(), 1);
        assert_eq!(r.trials, vec![TrialCounts::default()]);
        assert_eq!(r.count_percentile, 1.0);
    }

    fn small_cohort() -> Vec<Trajectory> {
        generate_trial(&SynthSpec {
            n_users: 3,
            horizon: 100,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let users = small_cohort();
        let cfg = StudyConfig {
            resamples: 6,
            master_seed: 3,
            delta_grid: Some(vec![0.35, 0.4, 0.45]),
            ..Default::default()
        };
        let a = run_study(&users, &cfg).unwrap();
        let b = run_study(&users, &cfg).unwrap();
        let c = run_study(&users, &StudyConfig { workers: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.runs_executed, 18);
        for t in &a.trials {
            assert_eq!(t.numint, t.numint_plus + t.numint_minus);
        }
        let grid = a.grid.unwrap();
        for b in 0..6 {
            assert!(grid[0].trials[b].numint >= grid[1].trials[b].numint);
            assert!(grid[1].trials[b].numint >= grid[2].trials[b].numint);
        }
        assert_eq!(grid[1].fraction, a.count_percentile);
    }

    #[test]
    fn grid_rescoring_does_not_simulate() {
        let users = small_cohort();
        let inputs: Vec<UserInput<'_>> = users.iter().map(UserInput::from).collect();
        let cfg = StudyConfig {
            resamples: 4,
            ..Default::default()
        };
        let data = simulate(&inputs, &cfg).unwrap();
        let before = (data.runs_executed, data.rng_draws);
        let grid = stability_grid(&data, &[0.3, 0.4], &[0.2, 0.4]).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!((data.runs_executed, data.rng_draws), before);
        for cell in grid {
            let single = summarize(
                &data,
                &StudyConfig {
                    score: ScoreConfig {
                        delta: cell.delta,
                        gamma: cell.gamma,
                        ..cfg.score
                    },
                    ..cfg.clone()
                },
            )
            .unwrap();
            assert_eq!(single.trials, cell.trials);
            assert_eq!(single.count_percentile, cell.fraction);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(StudyConfig { resamples: 0, ..Default::default() }.validate().is_err());
        assert!(StudyConfig { delta_grid: Some(vec![]), ..Default::default() }.validate().is_err());
        assert!(StudyConfig { noise_var: Some(0.0), ..Default::default() }.validate().is_err());
        let u = small_cohort();
        let dup = vec![u[0].clone(), u[0].clone()];
        assert!(run_study(&dup, &StudyConfig { resamples: 1, ..Default::default() }).is_err());
    }
}
