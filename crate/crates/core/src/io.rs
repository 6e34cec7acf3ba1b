//! File formats: trajectory and score CSVs, the TOML configuration, the
//! coefficients JSON and the study output bundle.
//!
//! Every file written here starts with (CSV) or contains (JSON) the master
//! seed and the configuration hash. Floats use Rust's shortest round-trip
//! formatting.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use csv::StringRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{FittedModel, Prior, ResidualSummary, RewardFit};
use crate::error::{Error, Result};
use crate::generative::{AlgorithmConfig, DEFAULT_WARMUP_DAYS, DEFAULT_WARMUP_PROB};
use crate::interestingness::{ScoreConfig, ScoreResult, ScoreSummary};
use crate::model::{
    day_of, ContextFeatures, DecisionPoint, Standardization, Trajectory, F_DIM, G_DIM,
};
use crate::policy::ThresholdPolicy;
use crate::study::{GroundTruthKind, Resamples, StudyConfig, StudyResult, DEFAULT_RESAMPLES};
use crate::synth::SynthSpec;

pub const TRAJECTORY_COLUMNS: [&str; 16] = [
    "user_id",
    "t",
    "day",
    "available",
    "engagement",
    "variation",
    "location",
    "temperature",
    "prior30",
    "yesterday",
    "antised",
    "dosage",
    "action",
    "prob",
    "reward",
    "missing",
];

/// Extra trajectory column holding a recorded advantage forecast.
pub const FORECAST_COLUMN: &str = "forecast";

/// Seed and configuration hash carried by every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub config_hash: String,
}

impl Provenance {
    fn comment(&self) -> String {
        format!(
            "# master_seed={},config_hash={}\n",
            self.master_seed, self.config_hash
        )
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

// ---------------------------------------------------------------- trajectories

/// Trajectories plus forecasts when the file carried a `forecast` column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub trajectories: Vec<Trajectory>,
    pub forecasts: Option<Vec<Vec<Option<f64>>>>,
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn get<'r>(&self, rec: &'r StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i))
    }
}

struct RowParser<'a> {
    path: &'a Path,
    line: u64,
}

impl RowParser<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn opt_f64(&self, name: &str, cell: &str) -> Result<Option<f64>> {
        if cell.is_empty() {
            return Ok(None);
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| self.err(format!("column `{name}`: `{cell}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(format!("column `{name}`: `{cell}` is not finite")));
        }
        Ok(Some(v))
    }

    fn f64(&self, name: &str, cell: &str) -> Result<f64> {
        self.opt_f64(name, cell)?
            .ok_or_else(|| self.err(format!("column `{name}` is empty")))
    }

    fn opt_bool(&self, name: &str, cell: &str) -> Result<Option<bool>> {
        match cell.to_ascii_lowercase().as_str() {
            "" => Ok(None),
            "1" | "true" => Ok(Some(true)),
            "0" | "false" => Ok(Some(false)),
            _ => Err(self.err(format!("column `{name}`: `{cell}` is not 0/1"))),
        }
    }

    fn bool(&self, name: &str, cell: &str) -> Result<bool> {
        self.opt_bool(name, cell)?
            .ok_or_else(|| self.err(format!("column `{name}` is empty")))
    }

    fn usize(&self, name: &str, cell: &str) -> Result<usize> {
        cell.parse()
            .map_err(|_| self.err(format!("column `{name}`: `{cell}` is not a positive integer")))
    }
}

struct UserRows {
    user_id: String,
    points: Vec<DecisionPoint>,
    forecasts: Vec<Option<f64>>,
    last_line: u64,
}

/// Parses a trajectory CSV. All malformed rows are reported together.
pub fn parse_trajectories<R: Read>(reader: R, path: &Path) -> Result<TrajectoryTable> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::EmptyInput("trajectory file has no header"));
    }
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let header_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    for col in TRAJECTORY_COLUMNS {
        if col != "dosage" && !index.contains_key(col) {
            return Err(header_err(format!("missing column `{col}`")));
        }
    }
    for h in headers.iter() {
        if !TRAJECTORY_COLUMNS.contains(&h) && h != FORECAST_COLUMN {
            return Err(header_err(format!("unknown column `{h}`")));
        }
    }
    let cols = Columns { index };
    let has_dosage = cols.index.contains_key("dosage");
    let has_forecast = cols.index.contains_key(FORECAST_COLUMN);

    let mut users: Vec<UserRows> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    let mut records = 0usize;

    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        records += 1;
        let p = RowParser {
            path,
            line: rec.position().map(|p| p.line()).unwrap_or(0),
        };
        let cell = |name: &str| cols.get(&rec, name).unwrap_or("");
        let parsed = (|| -> Result<(String, DecisionPoint, Option<f64>)> {
            let user_id = cell("user_id").to_string();
            if user_id.is_empty() {
                return Err(p.err("column `user_id` is empty"));
            }
            let t = p.usize("t", cell("t"))?;
            let day = p.usize("day", cell("day"))?;
            if t == 0 || day != day_of(t) {
                return Err(p.err(format!("day {day} does not match decision time {t}")));
            }
            let context = ContextFeatures {
                engagement: p.bool("engagement", cell("engagement"))?,
                variation: p.bool("variation", cell("variation"))?,
                location: p.bool("location", cell("location"))?,
                temperature: p.f64("temperature", cell("temperature"))?,
                prior_30min_steps: p.f64("prior30", cell("prior30"))?,
                yesterday_steps: p.f64("yesterday", cell("yesterday"))?,
            };
            let dosage = if has_dosage {
                p.f64("dosage", cell("dosage"))?
            } else {
                0.0
            };
            let point = DecisionPoint {
                t,
                day,
                available: p.bool("available", cell("available"))?,
                context,
                anti_sedentary: p.bool("antised", cell("antised"))?,
                dosage,
                action: p.opt_bool("action", cell("action"))?,
                action_prob: p.opt_f64("prob", cell("prob"))?,
                reward: p.opt_f64("reward", cell("reward"))?,
                missing: p.opt_bool("missing", cell("missing"))?.unwrap_or(false),
            };
            let forecast = if has_forecast {
                p.opt_f64(FORECAST_COLUMN, cell(FORECAST_COLUMN))?
            } else {
                None
            };
            Ok((user_id, point, forecast))
        })();
        let (user_id, point, forecast) = match parsed {
            Ok(v) => v,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let slot = match seen.get(&user_id) {
            Some(&k) if k + 1 == users.len() => k,
            Some(_) => {
                errors.push(p.err(format!("rows for user `{user_id}` are not contiguous")));
                continue;
            }
            None => {
                seen.insert(user_id.clone(), users.len());
                users.push(UserRows {
                    user_id,
                    points: Vec::new(),
                    forecasts: Vec::new(),
                    last_line: 0,
                });
                users.len() - 1
            }
        };
        let u = &mut users[slot];
        let expected = u.points.len() + 1;
        if point.t != expected {
            errors.push(p.err(format!(
                "user `{}`: expected decision time {expected}, found {}",
                u.user_id, point.t
            )));
            continue;
        }
        u.last_line = p.line;
        u.points.push(point);
        u.forecasts.push(forecast);
    }
    if records == 0 && errors.is_empty() {
        return Err(Error::EmptyInput("trajectory file has no rows"));
    }

    let mut trajectories = Vec::with_capacity(users.len());
    let mut forecasts = Vec::with_capacity(users.len());
    for u in users {
        let built = if has_dosage {
            Trajectory::new(u.user_id, u.points)
        } else {
            Trajectory::with_recomputed_dosage(u.user_id, u.points)
        };
        match built {
            Ok(t) => {
                trajectories.push(t);
                forecasts.push(u.forecasts);
            }
            Err(e) => errors.push(Error::Parse {
                path: path.to_path_buf(),
                line: u.last_line,
                message: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Rows(errors));
    }
    Ok(TrajectoryTable {
        trajectories,
        forecasts: has_forecast.then_some(forecasts),
    })
}

pub fn read_trajectory_table(path: &Path) -> Result<TrajectoryTable> {
    parse_trajectories(fs::File::open(path)?, path)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    Ok(read_trajectory_table(path)?.trajectories)
}

pub fn write_trajectories<W: Write>(w: W, trajectories: &[Trajectory], prov: &Provenance) -> Result<()> {
    let mut w = w;
    w.write_all(prov.comment().as_bytes())?;
    let mut out = csv_writer(w);
    out.write_record(TRAJECTORY_COLUMNS)?;
    for traj in trajectories {
        for p in &traj.points {
            out.write_record([
                traj.user_id.clone(),
                p.t.to_string(),
                p.day.to_string(),
                fmt_bool(p.available).into(),
                fmt_bool(p.context.engagement).into(),
                fmt_bool(p.context.variation).into(),
                fmt_bool(p.context.location).into(),
                fmt_f64(p.context.temperature),
                fmt_f64(p.context.prior_30min_steps),
                fmt_f64(p.context.yesterday_steps),
                fmt_bool(p.anti_sedentary).into(),
                fmt_f64(p.dosage),
                p.action.map(|a| fmt_bool(a).to_string()).unwrap_or_default(),
                fmt_opt(p.action_prob),
                fmt_opt(p.reward),
                fmt_bool(p.missing).into(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Applies standardization constants to every continuous context feature.
pub fn standardize(trajectories: &mut [Trajectory], s: &Standardization) -> Result<()> {
    s.validate()?;
    for traj in trajectories.iter_mut() {
        for p in &mut traj.points {
            s.apply(&mut p.context);
        }
        traj.validate()?;
    }
    Ok(())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub ground_truth: GroundTruthKind,
    pub resamples: usize,
    pub master_seed: u64,
    /// Not part of the configuration hash: results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: usize,
    pub noise_var: Option<f64>,
    pub delta_grid: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
    pub write_resample_scores: bool,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            ground_truth: GroundTruthKind::NullAdvantage,
            resamples: DEFAULT_RESAMPLES,
            master_seed: 0,
            workers: 1,
            noise_var: None,
            delta_grid: None,
            gamma_grid: None,
            write_resample_scores: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub warmup_days: usize,
    pub warmup_prob: f64,
    /// Constant threshold η.
    pub eta: f64,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        Self {
            warmup_days: DEFAULT_WARMUP_DAYS,
            warmup_prob: DEFAULT_WARMUP_PROB,
            eta: 0.0,
        }
    }
}

/// Overrides of the prior; covariances are given by their diagonals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub mu_alpha: Option<Vec<f64>>,
    pub sigma_alpha_diag: Option<Vec<f64>>,
    pub mu_beta: Option<Vec<f64>>,
    pub sigma_beta_diag: Option<Vec<f64>>,
}

fn checked<const N: usize>(name: &str, v: &[f64]) -> Result<nalgebra::SVector<f64, N>> {
    if v.len() != N {
        return Err(Error::InvalidConfig(format!(
            "prior.{name} needs {N} entries, found {}",
            v.len()
        )));
    }
    Ok(nalgebra::SVector::<f64, N>::from_column_slice(v))
}

impl PriorSection {
    pub fn prior(&self) -> Result<Prior> {
        let mut p = Prior::default();
        if let Some(v) = &self.mu_alpha {
            p.mu_alpha = checked::<G_DIM>("mu_alpha", v)?;
        }
        if let Some(v) = &self.sigma_alpha_diag {
            p.sigma_alpha = nalgebra::SMatrix::from_diagonal(&checked::<G_DIM>("sigma_alpha_diag", v)?);
        }
        if let Some(v) = &self.mu_beta {
            p.mu_beta = checked::<F_DIM>("mu_beta", v)?;
        }
        if let Some(v) = &self.sigma_beta_diag {
            p.sigma_beta = nalgebra::SMatrix::from_diagonal(&checked::<F_DIM>("sigma_beta_diag", v)?);
        }
        p.validate()?;
        Ok(p)
    }
}

/// Contents of the TOML configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub study: StudySection,
    pub score: ScoreConfig,
    pub algorithm: AlgorithmSection,
    pub prior: PriorSection,
    pub standardization: Standardization,
    pub synth: SynthSpec,
}

fn line_of(text: &str, offset: usize) -> u64 {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() as u64 + 1
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.study_config()?.validate()?;
        self.standardization.validate()?;
        self.synth.validate()
    }

    pub fn algorithm_config(&self) -> Result<AlgorithmConfig> {
        let algo = AlgorithmConfig {
            prior: self.prior.prior()?,
            eta0: ThresholdPolicy::Constant(self.algorithm.eta),
            warmup_days: self.algorithm.warmup_days,
            warmup_prob: self.algorithm.warmup_prob,
        };
        if !self.algorithm.eta.is_finite() {
            return Err(Error::InvalidConfig("algorithm.eta must be finite".into()));
        }
        algo.validate()?;
        Ok(algo)
    }

    pub fn study_config(&self) -> Result<StudyConfig> {
        let s = &self.study;
        Ok(StudyConfig {
            ground_truth: s.ground_truth,
            resamples: s.resamples,
            master_seed: s.master_seed,
            score: self.score,
            delta_grid: s.delta_grid.clone(),
            gamma_grid: s.gamma_grid.clone(),
            workers: s.workers,
            algorithm: self.algorithm_config()?,
            noise_var: s.noise_var,
            keep_runs: false,
        })
    }

    /// SHA-256 of the canonical JSON form (worker count excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn provenance(&self, master_seed: u64) -> Provenance {
        Provenance {
            master_seed,
            config_hash: self.hash(),
        }
    }
}

// ---------------------------------------------------------------- coefficients

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserCoefficients {
    pub user_id: String,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub noise_var: f64,
    pub residuals: ResidualSummary,
}

impl UserCoefficients {
    pub fn new(user_id: &str, m: &FittedModel) -> Self {
        Self {
            user_id: user_id.to_string(),
            alpha: m.fit.alpha.iter().copied().collect(),
            beta: m.fit.beta.iter().copied().collect(),
            noise_var: m.noise_var,
            residuals: m.residuals,
        }
    }

    pub fn fitted(&self) -> Result<FittedModel> {
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "user `{}`: noise_var {} must be positive",
                self.user_id, self.noise_var
            )));
        }
        Ok(FittedModel {
            fit: RewardFit::from_slices(&self.alpha, &self.beta)?,
            noise_var: self.noise_var,
            residuals: self.residuals,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub users: Vec<UserCoefficients>,
    pub excluded: Vec<crate::study::ExcludedUser>,
}

impl CoefficientsFile {
    pub fn fitted_by_user(&self) -> Result<HashMap<String, FittedModel>> {
        self.users
            .iter()
            .map(|u| Ok((u.user_id.clone(), u.fitted()?)))
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------- scores

pub const SCORE_COLUMNS: [&str; 8] = [
    "user_id",
    "score",
    "good_days",
    "days",
    "eligible",
    "interesting",
    "interesting_plus",
    "interesting_minus",
];

pub fn write_scores<W: Write>(w: W, results: &[ScoreResult], prov: &Provenance) -> Result<()> {
    let mut w = w;
    w.write_all(prov.comment().as_bytes())?;
    let mut out = csv_writer(w);
    out.write_record(SCORE_COLUMNS)?;
    for r in results {
        out.write_record([
            r.user_id.clone(),
            fmt_opt(r.score),
            r.good_day_count.to_string(),
            r.days.to_string(),
            fmt_bool(r.eligible).into(),
            fmt_bool(r.interesting).into(),
            fmt_bool(r.interesting_plus).into(),
            fmt_bool(r.interesting_minus).into(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the `(score, good_days, days)` part of a score CSV; the
/// classification columns are recomputed by whoever consumes it.
pub fn read_scores(path: &Path) -> Result<BTreeMap<String, ScoreSummary>> {
    let mut rdr = csv_reader(fs::File::open(path)?);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (iu, is, ig, id) = (pos("user_id")?, pos("score")?, pos("good_days")?, pos("days")?);
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let p = RowParser {
            path,
            line: rec.position().map(|p| p.line()).unwrap_or(0),
        };
        let row = (|| -> Result<(String, ScoreSummary)> {
            let user = rec.get(iu).unwrap_or("").to_string();
            if user.is_empty() {
                return Err(p.err("column `user_id` is empty"));
            }
            let summary = ScoreSummary {
                score: p.opt_f64("score", rec.get(is).unwrap_or(""))?,
                good_days: p.usize("good_days", rec.get(ig).unwrap_or(""))?,
                days: p.usize("days", rec.get(id).unwrap_or(""))?,
            };
            if summary.good_days > summary.days {
                return Err(p.err("good_days exceeds days"));
            }
            if out.contains_key(&user) {
                return Err(p.err(format!("duplicate user `{user}`")));
            }
            Ok((user, summary))
        })();
        match row {
            Ok((u, s)) => {
                out.insert(u, s);
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Rows(errors));
    }
    Ok(out)
}

// ---------------------------------------------------------------- study bundle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub ground_truth: GroundTruthKind,
    pub resamples: usize,
    pub delta: f64,
    pub gamma: f64,
    pub users: usize,
    pub excluded_users: usize,
    pub observed: crate::study::TrialCounts,
    pub count_percentile: f64,
    pub count_percentile_plus: f64,
    pub count_percentile_minus: f64,
    pub runs_executed: u64,
    pub config: ConfigFile,
}

pub mod bundle {
    pub const TRIALS: &str = "trials.csv";
    pub const USERS: &str = "users.csv";
    pub const SUMMARY: &str = "summary.json";
    pub const GRID: &str = "grid.csv";
    pub const GRID_TRIALS: &str = "grid_trials.csv";
    pub const RESAMPLE_SCORES: &str = "resample_scores.csv";
    pub const EXCLUDED: &str = "excluded.csv";
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

const QUANTILES: [(&str, f64); 5] = [
    ("q05", 0.05),
    ("q25", 0.25),
    ("q50", 0.5),
    ("q75", 0.75),
    ("q95", 0.95),
];

fn create(dir: &Path, name: &str, prov: &Provenance) -> Result<csv::Writer<fs::File>> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(prov.comment().as_bytes())?;
    Ok(csv_writer(f))
}

/// Writes the study bundle into `dir`, returning the paths written.
pub fn write_study_bundle(
    dir: &Path,
    data: &Resamples,
    result: &StudyResult,
    config: &ConfigFile,
    prov: &Provenance,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut w = create(dir, bundle::TRIALS, prov)?;
    w.write_record(["b", "numint", "numint_plus", "numint_minus"])?;
    for (b, t) in result.trials.iter().enumerate() {
        w.write_record([
            (b + 1).to_string(),
            t.numint.to_string(),
            t.numint_plus.to_string(),
            t.numint_minus.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(dir.join(bundle::TRIALS));

    let mut w = create(dir, bundle::USERS, prov)?;
    let mut header: Vec<&str> = vec![
        "user_id",
        "observed_score",
        "eligible",
        "interesting",
        "interesting_plus",
        "interesting_minus",
        "lval",
        "eligible_resamples",
        "eligibility_varies",
    ];
    header.extend(QUANTILES.iter().map(|(n, _)| *n));
    w.write_record(&header)?;
    for (report, user) in result.users.iter().zip(&data.users) {
        let mut scores: Vec<f64> = user
            .resamples
            .iter()
            .filter_map(|s| s.eligible_score(result.gamma))
            .collect();
        scores.sort_by(f64::total_cmp);
        let mut row = vec![
            report.user_id.clone(),
            fmt_opt(report.observed_score),
            fmt_bool(report.eligible).into(),
            fmt_bool(report.interesting).into(),
            fmt_bool(report.interesting_plus).into(),
            fmt_bool(report.interesting_minus).into(),
            fmt_opt(report.lval),
            report.eligible_resamples.to_string(),
            fmt_bool(report.eligibility_varies).into(),
        ];
        row.extend(QUANTILES.iter().map(|&(_, q)| fmt_opt(quantile(&scores, q))));
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(dir.join(bundle::USERS));

    let mut w = create(dir, bundle::EXCLUDED, prov)?;
    w.write_record(["user_id", "reason"])?;
    for e in &result.excluded {
        w.write_record([e.user_id.as_str(), e.reason.as_str()])?;
    }
    w.flush()?;
    written.push(dir.join(bundle::EXCLUDED));

    if let Some(grid) = &result.grid {
        let mut w = create(dir, bundle::GRID, prov)?;
        w.write_record([
            "delta",
            "gamma",
            "observed_count",
            "observed_plus",
            "observed_minus",
            "fraction",
        ])?;
        for c in grid {
            w.write_record([
                fmt_f64(c.delta),
                fmt_f64(c.gamma),
                c.observed.numint.to_string(),
                c.observed.numint_plus.to_string(),
                c.observed.numint_minus.to_string(),
                fmt_f64(c.fraction),
            ])?;
        }
        w.flush()?;
        written.push(dir.join(bundle::GRID));

        let mut w = create(dir, bundle::GRID_TRIALS, prov)?;
        w.write_record(["delta", "gamma", "b", "numint", "numint_plus", "numint_minus"])?;
        for c in grid {
            for (b, t) in c.trials.iter().enumerate() {
                w.write_record([
                    fmt_f64(c.delta),
                    fmt_f64(c.gamma),
                    (b + 1).to_string(),
                    t.numint.to_string(),
                    t.numint_plus.to_string(),
                    t.numint_minus.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(dir.join(bundle::GRID_TRIALS));
    }

    if config.study.write_resample_scores {
        let mut w = create(dir, bundle::RESAMPLE_SCORES, prov)?;
        w.write_record(["user_id", "b", "score", "good_days", "days"])?;
        for user in &data.users {
            for (b, s) in user.resamples.iter().enumerate() {
                w.write_record([
                    user.user_id.clone(),
                    (b + 1).to_string(),
                    fmt_opt(s.score),
                    s.good_days.to_string(),
                    s.days.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(dir.join(bundle::RESAMPLE_SCORES));
    }

    let summary = StudySummary {
        provenance: prov.clone(),
        ground_truth: config.study.ground_truth,
        resamples: data.resamples,
        delta: result.delta,
        gamma: result.gamma,
        users: result.users.len(),
        excluded_users: result.excluded.len(),
        observed: result.observed,
        count_percentile: result.count_percentile,
        count_percentile_plus: result.count_percentile_plus,
        count_percentile_minus: result.count_percentile_minus,
        runs_executed: result.runs_executed,
        config: config.clone(),
    };
    write_json(&dir.join(bundle::SUMMARY), &summary)?;
    written.push(dir.join(bundle::SUMMARY));
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance {
            master_seed: 9,
            config_hash: "abc".into(),
        }
    }

    const HEADER: &str = "user_id,t,day,available,engagement,variation,location,temperature,prior30,yesterday,antised,action,prob,reward,missing\n";

    fn row(user: &str, t: usize, avail: u8, action: &str, reward: &str) -> String {
        format!(
            "{user},{t},{},{avail},1,0,1,0.5,-1,2,0,{action},{},{reward},0\n",
            day_of(t),
            if avail == 1 { "0.25" } else { "" }
        )
    }

    #[test]
    fn empty_file_is_schema_error() {
        let e = parse_trajectories("".as_bytes(), Path::new("x.csv")).unwrap_err();
        assert!(e.is_validation(), "{e}");
        let e = parse_trajectories(HEADER.as_bytes(), Path::new("x.csv")).unwrap_err();
        assert!(matches!(e, Error::EmptyInput(_)));
    }

    #[test]
    fn dosage_recomputed_when_column_absent() {
        let mut text = HEADER.to_string();
        text += &row("a", 1, 1, "1", "0.3");
        text += &row("a", 2, 1, "0", "0.1");
        text += &row("a", 3, 0, "0", "");
        let table = parse_trajectories(text.as_bytes(), Path::new("x.csv")).unwrap();
        let pts = &table.trajectories[0].points;
        assert_eq!(pts[1].dosage, 1.0);
        assert_eq!(pts[2].dosage, 0.95);
        assert!(table.forecasts.is_none());
    }

    #[test]
    fn malformed_rows_are_located() {
        let mut text = HEADER.to_string();
        text += &row("a", 1, 1, "1", "0.3");
        text += "a,2,1,maybe,1,0,1,0.5,-1,2,0,0,0.25,0.1,0\n";
        text += &row("a", 3, 1, "0", "abc");
        let e = parse_trajectories(text.as_bytes(), Path::new("x.csv")).unwrap_err();
        let Error::Rows(rows) = &e else { panic!("{e}") };
        let lines: Vec<u64> = rows
            .iter()
            .filter_map(|r| match r {
                Error::Parse { line, .. } => Some(*line),
                _ => None,
            })
            .collect();
        assert_eq!(&lines[..2], &[3, 4]);
        assert!(e.to_string().contains("x.csv:3"));
    }

    #[test]
    fn non_contiguous_users_rejected() {
        let mut text = HEADER.to_string();
        text += &row("a", 1, 1, "1", "0.3");
        text += &row("b", 1, 1, "1", "0.3");
        text += &row("a", 2, 1, "1", "0.3");
        assert!(parse_trajectories(text.as_bytes(), Path::new("x.csv")).is_err());
    }

    #[test]
    fn trajectories_round_trip() {
        let spec = SynthSpec {
            n_users: 2,
            horizon: 40,
            seed: 5,
            ..Default::default()
        };
        let trial = crate::synth::generate_trial(&spec).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trial, &prov()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# master_seed=9,config_hash=abc\n"));
        let back = parse_trajectories(buf.as_slice(), Path::new("x.csv")).unwrap();
        assert_eq!(back.trajectories, trial);
    }

    #[test]
    fn config_parse_and_errors() {
        let cfg = ConfigFile::parse(
            "[study]\nresamples = 20\nground_truth = \"null-feature:variation\"\n[score]\nkind = \"type2:variation\"\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(cfg.study.resamples, 20);
        let sc = cfg.study_config().unwrap();
        assert_eq!(sc.ground_truth.to_string(), "null-feature:variation");

        let e = ConfigFile::parse("[study]\n\nresamplez = 3\n", Path::new("c.toml")).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
        assert!(ConfigFile::parse("[prior]\nmu_beta = [1.0]\n", Path::new("c.toml")).is_err());
        assert!(ConfigFile::parse("[study]\nresamples = 0\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn hash_ignores_workers() {
        let a = ConfigFile::default();
        let mut b = a.clone();
        b.study.workers = 8;
        assert_eq!(a.hash(), b.hash());
        b.study.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn coefficients_round_trip_exactly() {
        let m = FittedModel {
            fit: RewardFit::from_slices(&[0.1, 1.0 / 3.0, -2e-17, 4.0, 5.0, 6.0, 7.0, 8.0], &[
                std::f64::consts::PI,
                0.0,
                -1.5,
                1e300,
                2.0,
            ])
            .unwrap(),
            noise_var: 0.7,
            residuals: ResidualSummary {
                count: 3,
                mean: 1e-3,
                mean_square: 0.7,
            },
        };
        let file = CoefficientsFile {
            provenance: prov(),
            users: vec![UserCoefficients::new("u", &m)],
            excluded: vec![],
        };
        let text = serde_json::to_string(&file).unwrap();
        let back: CoefficientsFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.fitted_by_user().unwrap()["u"], m);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), Some(3.0));
        assert_eq!(quantile(&[0.0, 1.0], 0.25), Some(0.25));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
