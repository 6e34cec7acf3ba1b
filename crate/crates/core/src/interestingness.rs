//! Interestingness scores of advantage-forecast trajectories.
//!
//! Type 1 asks whether forecasts are consistently positive; type 2 asks
//! whether forecasts consistently differ between the two values of a binary
//! feature. Both come in a raw per-decision-time form and a smoothed daily
//! form that only scores "good" days and marks users with too few good days
//! as ineligible.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generative::{BetaSnapshot, ResampledTrajectory};
use crate::model::{days_for, BinaryFeature, ContextFeatures, SLOTS_PER_DAY};

pub const DEFAULT_DELTA: f64 = 0.4;
pub const DEFAULT_GAMMA: f64 = 0.4;
/// Slack for threshold comparisons of scores and good-day fractions, which
/// are ratios of small integers.
pub const SCORE_TOL: f64 = 1e-9;
/// Minimum available (or per-feature-value) decision times in a good day's window.
pub const MIN_WINDOW_COUNT: usize = 2;

/// Which interestingness score to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScoreKind {
    Type1,
    Type2(BinaryFeature),
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::Type1 => f.write_str("type1"),
            ScoreKind::Type2(v) => write!(f, "type2:{v}"),
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("type1") {
            return Ok(ScoreKind::Type1);
        }
        match s.split_once(':') {
            Some((k, v)) if k.eq_ignore_ascii_case("type2") => Ok(ScoreKind::Type2(v.parse()?)),
            _ => Err(Error::InvalidConfig(format!(
                "score kind `{s}` (expected `type1` or `type2:<feature>`)"
            ))),
        }
    }
}

impl TryFrom<String> for ScoreKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScoreKind> for String {
    fn from(k: ScoreKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    Raw,
    #[default]
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    /// Interestingness margin δ ∈ (0, 0.5).
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Eligibility slack γ ∈ (0, 1); users need a good-day fraction ≥ 1 − γ.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub smoothing: Smoothing,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScoreKind::Type1,
            delta: DEFAULT_DELTA,
            gamma: DEFAULT_GAMMA,
            smoothing: Smoothing::Smoothed,
        }
    }
}

pub fn validate_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("delta {delta} must lie in (0, 0.5)")))
    }
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma {gamma} must lie in (0, 1)")))
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        validate_delta(self.delta)?;
        validate_gamma(self.gamma)
    }
}

/// Read access to a trajectory of advantage forecasts.
///
/// Index `i` is the 0-based decision time; a forecast exists exactly at the
/// times counted as available (`I_t = 1`).
pub trait ForecastTrace {
    fn horizon(&self) -> usize;
    fn forecast(&self, i: usize) -> Option<f64>;
    fn context(&self, i: usize) -> &ContextFeatures;
    /// Whether the posterior was updated on the night of 1-based day `d`.
    fn updated_on_night(&self, d: usize) -> bool;

    fn dosage(&self, _i: usize) -> Option<f64> {
        None
    }

    /// Posterior β marginal in effect on 1-based day `d`.
    fn beta_snapshot(&self, _d: usize) -> Option<&BetaSnapshot> {
        None
    }

    fn days(&self) -> usize {
        days_for(self.horizon())
    }
}

impl ForecastTrace for ResampledTrajectory {
    fn horizon(&self) -> usize {
        self.points.len()
    }

    fn forecast(&self, i: usize) -> Option<f64> {
        let p = &self.points[i];
        if p.available {
            p.advantage
        } else {
            None
        }
    }

    fn context(&self, i: usize) -> &ContextFeatures {
        &self.points[i].context
    }

    fn updated_on_night(&self, d: usize) -> bool {
        d >= 1 && self.update_log.get(d - 1).copied().unwrap_or(false)
    }

    fn dosage(&self, i: usize) -> Option<f64> {
        Some(self.points[i].dosage)
    }

    fn beta_snapshot(&self, d: usize) -> Option<&BetaSnapshot> {
        d.checked_sub(1).and_then(|k| self.beta_snapshots.get(k))
    }
}

/// Plain forecast stream, e.g. loaded from an advantage CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageStream {
    pub user_id: String,
    pub contexts: Vec<ContextFeatures>,
    /// `None` where the user was unavailable.
    pub forecasts: Vec<Option<f64>>,
    pub update_log: Vec<bool>,
}

impl ForecastTrace for AdvantageStream {
    fn horizon(&self) -> usize {
        self.forecasts.len()
    }

    fn forecast(&self, i: usize) -> Option<f64> {
        self.forecasts[i]
    }

    fn context(&self, i: usize) -> &ContextFeatures {
        &self.contexts[i]
    }

    fn updated_on_night(&self, d: usize) -> bool {
        d >= 1 && self.update_log.get(d - 1).copied().unwrap_or(false)
    }
}

/// `#{t : Δ̂_t > 0} / #{t : masked in}` over the times selected by `mask`.
pub fn raw_intscore1(advantages: &[f64], mask: &[bool]) -> Result<f64> {
    if advantages.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: advantages.len(),
            got: mask.len(),
        });
    }
    let (mut pos, mut n) = (0usize, 0usize);
    for (&a, _) in advantages.iter().zip(mask).filter(|(_, &m)| m) {
        n += 1;
        if a > 0.0 {
            pos += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no available advantage forecasts"));
    }
    Ok(pos as f64 / n as f64)
}

fn raw_score1_trace<T: ForecastTrace + ?Sized>(trace: &T) -> Result<f64> {
    let (adv, mask): (Vec<f64>, Vec<bool>) = (0..trace.horizon())
        .map(|i| match trace.forecast(i) {
            Some(a) => (a, true),
            None => (0.0, false),
        })
        .unzip();
    raw_intscore1(&adv, &mask)
}

/// Fraction of available times where toggling `feature` to 1 gives a strictly
/// larger forecast than toggling it to 0, under that day's posterior.
pub fn raw_intscore2<T: ForecastTrace + ?Sized>(trace: &T, feature: BinaryFeature) -> Result<f64> {
    let (mut wins, mut n) = (0usize, 0usize);
    for i in 0..trace.horizon() {
        if trace.forecast(i).is_none() {
            continue;
        }
        let d = i / SLOTS_PER_DAY + 1;
        let snap = trace.beta_snapshot(d).ok_or(Error::MissingSnapshot { day: d })?;
        let dosage = trace.dosage(i).ok_or(Error::MissingSnapshot { day: d })?;
        let mut on = *trace.context(i);
        feature.set(&mut on, true);
        let mut off = on;
        feature.set(&mut off, false);
        if snap.advantage(&on, dosage)? > snap.advantage(&off, dosage)? {
            wins += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("no available advantage forecasts"));
    }
    Ok(wins as f64 / n as f64)
}

/// Decision times (1-based) of the window for day `d`: the day's own slots
/// for type 1, days `d − 1 ..= d + 1` for type 2, clipped to `[1, horizon]`.
pub fn sliding_window(d: usize, kind: ScoreKind, horizon: usize) -> RangeInclusive<usize> {
    let (first_day, last_day) = match kind {
        ScoreKind::Type1 => (d, d),
        ScoreKind::Type2(_) => (d.saturating_sub(1).max(1), d + 1),
    };
    let lo = (first_day - 1) * SLOTS_PER_DAY + 1;
    let hi = (last_day * SLOTS_PER_DAY).min(horizon);
    lo..=hi
}

/// Availability-weighted sums over one window.
#[derive(Debug, Default, Clone, Copy)]
struct WindowSums {
    n: usize,
    sum: f64,
    n_on: usize,
    sum_on: f64,
    n_off: usize,
    sum_off: f64,
}

fn window_sums<T: ForecastTrace + ?Sized>(trace: &T, window: RangeInclusive<usize>, kind: ScoreKind) -> WindowSums {
    let mut s = WindowSums::default();
    for t in window {
        let i = t - 1;
        let Some(a) = trace.forecast(i) else { continue };
        s.n += 1;
        s.sum += a;
        if let ScoreKind::Type2(v) = kind {
            if v.value(trace.context(i)) {
                s.n_on += 1;
                s.sum_on += a;
            } else {
                s.n_off += 1;
                s.sum_off += a;
            }
        }
    }
    s
}

fn is_good(trace: &(impl ForecastTrace + ?Sized), d: usize, kind: ScoreKind, s: &WindowSums) -> bool {
    match kind {
        ScoreKind::Type1 => s.n >= MIN_WINDOW_COUNT && trace.updated_on_night(d.wrapping_sub(1)),
        ScoreKind::Type2(_) => {
            let days = trace.days();
            s.n_on >= MIN_WINDOW_COUNT
                && s.n_off >= MIN_WINDOW_COUNT
                && [d.wrapping_sub(1), d, d + 1]
                    .into_iter()
                    .any(|k| k >= 1 && k <= days && trace.updated_on_night(k))
        }
    }
}

/// Good-day indicator `G_{d,1}` or `G_{d,2,v}`.
pub fn good_day<T: ForecastTrace + ?Sized>(trace: &T, d: usize, kind: ScoreKind) -> bool {
    let s = window_sums(trace, sliding_window(d, kind, trace.horizon()), kind);
    is_good(trace, d, kind, &s)
}

/// Score of one trajectory, independent of δ and γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    /// `None` when no day (or time, for raw scores) can be scored.
    pub score: Option<f64>,
    pub good_days: usize,
    pub days: usize,
}

impl ScoreSummary {
    pub fn good_fraction(&self) -> f64 {
        if self.days == 0 {
            0.0
        } else {
            self.good_days as f64 / self.days as f64
        }
    }

    /// Good-day fraction at least `1 − γ`, with at least one good day.
    pub fn eligible(&self, gamma: f64) -> bool {
        self.score.is_some() && self.good_days > 0 && self.good_fraction() >= 1.0 - gamma - SCORE_TOL
    }

    /// Score if eligible at `gamma`.
    pub fn eligible_score(&self, gamma: f64) -> Option<f64> {
        if self.eligible(gamma) {
            self.score
        } else {
            None
        }
    }

    pub fn classify(&self, delta: f64, gamma: f64) -> Option<Classification> {
        self.eligible_score(gamma).map(|s| Classification::of(s, delta))
    }

    pub fn result(&self, user_id: &str, delta: f64, gamma: f64) -> ScoreResult {
        let class = self.classify(delta, gamma);
        ScoreResult {
            user_id: user_id.to_string(),
            score: self.eligible_score(gamma),
            eligible: class.is_some(),
            good_day_count: self.good_days,
            days: self.days,
            interesting: class.is_some_and(|c| c.interesting),
            interesting_plus: class.is_some_and(|c| c.plus),
            interesting_minus: class.is_some_and(|c| c.minus),
        }
    }
}

/// Scores a trace under `kind` and `smoothing`.
pub fn score_summary<T: ForecastTrace + ?Sized>(trace: &T, kind: ScoreKind, smoothing: Smoothing) -> Result<ScoreSummary> {
    let days = trace.days();
    if smoothing == Smoothing::Raw {
        let score = match kind {
            ScoreKind::Type1 => raw_score1_trace(trace),
            ScoreKind::Type2(v) => raw_intscore2(trace, v),
        };
        return match score {
            Ok(s) => Ok(ScoreSummary {
                score: Some(s),
                good_days: days,
                days,
            }),
            Err(Error::EmptyInput(_)) => Ok(ScoreSummary {
                score: None,
                good_days: 0,
                days,
            }),
            Err(e) => Err(e),
        };
    }
    let (mut good, mut wins) = (0usize, 0usize);
    for d in 1..=days {
        let s = window_sums(trace, sliding_window(d, kind, trace.horizon()), kind);
        if !is_good(trace, d, kind, &s) {
            continue;
        }
        good += 1;
        let win = match kind {
            ScoreKind::Type1 => s.sum / s.n as f64 > 0.0,
            ScoreKind::Type2(_) => s.sum_on / s.n_on as f64 > s.sum_off / s.n_off as f64,
        };
        if win {
            wins += 1;
        }
    }
    Ok(ScoreSummary {
        score: (good > 0).then(|| wins as f64 / good as f64),
        good_days: good,
        days,
    })
}

/// Per-user scoring outcome at fixed δ and γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub user_id: String,
    /// Present only for eligible users.
    pub score: Option<f64>,
    pub eligible: bool,
    pub good_day_count: usize,
    pub days: usize,
    pub interesting: bool,
    pub interesting_plus: bool,
    pub interesting_minus: bool,
}

/// Smoothed (or raw, per `config.smoothing`) score with eligibility and flags.
pub fn smoothed_intscore<T: ForecastTrace + ?Sized>(trace: &T, user_id: &str, config: &ScoreConfig) -> Result<ScoreResult> {
    Ok(score_summary(trace, config.kind, config.smoothing)?.result(user_id, config.delta, config.gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Classification {
    pub interesting: bool,
    pub plus: bool,
    pub minus: bool,
}

impl Classification {
    /// `plus ⟺ score ≥ 0.5 + δ`, `minus ⟺ score ≤ 0.5 − δ`; boundaries included.
    pub fn of(score: f64, delta: f64) -> Self {
        let plus = score >= 0.5 + delta - SCORE_TOL;
        let minus = score <= 0.5 - delta + SCORE_TOL;
        Self {
            interesting: plus || minus,
            plus,
            minus,
        }
    }
}

/// Flags for an eligible result; `None` for an ineligible one.
pub fn classify(result: &ScoreResult, delta: f64) -> Option<Classification> {
    match (result.eligible, result.score) {
        (true, Some(s)) => Some(Classification::of(s, delta)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(forecasts: Vec<Option<f64>>, var: impl Fn(usize) -> bool, updates: Vec<bool>) -> AdvantageStream {
        let contexts = (0..forecasts.len())
            .map(|i| ContextFeatures {
                variation: var(i),
                ..Default::default()
            })
            .collect();
        AdvantageStream {
            user_id: "u".into(),
            contexts,
            forecasts,
            update_log: updates,
        }
    }

    #[test]
    fn raw_type1_examples() {
        let all = [true; 4];
        assert_eq!(raw_intscore1(&[1.0; 4], &all).unwrap(), 1.0);
        assert_eq!(raw_intscore1(&[1.0, -1.0, 1.0, -1.0], &all).unwrap(), 0.5);
        assert_eq!(raw_intscore1(&[-0.2, 0.3, 0.0, 1.1], &all).unwrap(), 0.5);
        assert!(raw_intscore1(&[], &[]).is_err());
        assert!(raw_intscore1(&[1.0], &[false]).is_err());
        assert_eq!(raw_intscore1(&[1.0, -5.0], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn windows() {
        assert_eq!(sliding_window(1, ScoreKind::Type1, 450), 1..=5);
        assert_eq!(sliding_window(3, ScoreKind::Type1, 450), 11..=15);
        let t2 = ScoreKind::Type2(BinaryFeature::Variation);
        assert_eq!(sliding_window(1, t2, 450), 1..=10);
        assert_eq!(sliding_window(90, t2, 450), 441..=450);
        assert_eq!(sliding_window(4, t2, 450), 11..=25);
        assert_eq!(sliding_window(3, ScoreKind::Type1, 12), 11..=12);
    }

    #[test]
    fn good_day_rules() {
        let t2 = ScoreKind::Type2(BinaryFeature::Variation);
        // day 2 unavailable entirely
        let mut f: Vec<Option<f64>> = vec![Some(1.0); 15];
        for x in &mut f[5..10] {
            *x = None;
        }
        let s = stream(f, |_| true, vec![true, true, true]);
        assert!(!good_day(&s, 2, ScoreKind::Type1));
        assert!(good_day(&s, 3, ScoreKind::Type1));
        // day 1 has no preceding night
        assert!(!good_day(&s, 1, ScoreKind::Type1));
        // no diversity in variation
        assert!(!good_day(&s, 2, t2));

        // 2 available var=1 and 2 available var=0, update on night d
        let f = vec![Some(0.5), Some(0.5), Some(-0.5), Some(-0.5), None, None, None, None, None, None];
        let s = stream(f, |i| i < 2, vec![false, false]);
        assert!(!good_day(&s, 1, t2));
        let f = vec![Some(0.5), Some(0.5), Some(-0.5), Some(-0.5), None, None, None, None, None, None];
        let s = stream(f, |i| i < 2, vec![true, false]);
        assert!(good_day(&s, 1, t2));
        assert!(good_day(&s, 2, t2));
    }

    #[test]
    fn smoothed_positive_and_ineligible() {
        let s = stream(vec![Some(0.7); 50], |_| false, vec![true; 10]);
        let sum = score_summary(&s, ScoreKind::Type1, Smoothing::Smoothed).unwrap();
        assert_eq!(sum.score, Some(1.0));
        assert_eq!(sum.good_days, 9);
        assert!(sum.eligible(0.4));
        assert!(!sum.eligible(0.05));

        let none = stream(vec![None; 50], |_| false, vec![false; 10]);
        let sum = score_summary(&none, ScoreKind::Type1, Smoothing::Smoothed).unwrap();
        assert_eq!(sum.score, None);
        assert!(!sum.eligible(0.99));
        let r = smoothed_intscore(&none, "u", &ScoreConfig::default()).unwrap();
        assert!(!r.eligible && r.score.is_none() && !r.interesting);
        assert!(classify(&r, 0.4).is_none());
    }

    #[test]
    fn type2_ties_are_not_wins() {
        let s = stream(vec![Some(0.3); 30], |i| i % 2 == 0, vec![true; 6]);
        let sum = score_summary(&s, ScoreKind::Type2(BinaryFeature::Variation), Smoothing::Smoothed).unwrap();
        assert_eq!(sum.score, Some(0.0));
        assert_eq!(sum.good_days, 6);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(
            Classification::of(1.0, 0.4),
            Classification { interesting: true, plus: true, minus: false }
        );
        assert_eq!(
            Classification::of(0.5, 0.1),
            Classification { interesting: false, plus: false, minus: false }
        );
        assert_eq!(
            Classification::of(0.1, 0.4),
            Classification { interesting: true, plus: false, minus: true }
        );
        assert!(Classification::of(0.9, 0.4).plus);
        assert!(!Classification::of(0.89, 0.4).interesting);
    }

    #[test]
    fn score_kind_parsing() {
        assert_eq!("type1".parse::<ScoreKind>().unwrap(), ScoreKind::Type1);
        assert_eq!(
            "type2:location".parse::<ScoreKind>().unwrap(),
            ScoreKind::Type2(BinaryFeature::Location)
        );
        assert!("type2:dosage".parse::<ScoreKind>().is_err());
        assert!("type3".parse::<ScoreKind>().is_err());
        assert_eq!(ScoreKind::Type2(BinaryFeature::Variation).to_string(), "type2:variation");
    }

    #[test]
    fn config_bounds() {
        assert!(ScoreConfig::default().validate().is_ok());
        assert!(ScoreConfig { delta: 0.5, ..Default::default() }.validate().is_err());
        assert!(ScoreConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
    }
}
