//! Command-line front end: `synth`, `fit`, `score` and `study`.
//!
//! Exit status is 0 on success, 1 for invalid inputs or configuration and 2
//! for failures during computation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use parasim::bayes::fit_with_noise_estimate;
use parasim::interestingness::{score_summary, AdvantageStream, ScoreResult, ScoreSummary};
use parasim::io::{self, CoefficientsFile, ConfigFile, UserCoefficients};
use parasim::study::{observed_summary, simulate, summarize, ExcludedUser, GroundTruthKind, UserInput};
use parasim::synth::generate_trial;
use parasim::Error;

#[derive(Parser)]
#[command(name = "parasim", version, about = "Resampling audit of Thompson-sampling personalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreFlags {
    /// Interestingness margin δ.
    #[arg(long)]
    delta: Option<f64>,
    /// Eligibility tolerance γ.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trial from the `[synth]` section.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the per-user reward model; writes coefficients.json.
    Fit {
        trajectories: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score observed forecasts; writes scores.csv.
    Score {
        trajectories: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        score: ScoreFlags,
        /// Fitted coefficients (σ² for the replay) from `fit`.
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
    /// Run the resampling study; writes the result bundle.
    Study {
        trajectories: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        score: ScoreFlags,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// `null-advantage` or `null-feature:<name>`.
        #[arg(long)]
        ground_truth: Option<GroundTruthKind>,
        /// Stability grid as `DELTAS[:GAMMAS]`, e.g. `0.35,0.4,0.45:0.3,0.4`.
        #[arg(long)]
        grid: Option<String>,
        /// Fitted coefficients from `fit`.
        #[arg(long)]
        coefficients: Option<PathBuf>,
        /// Observed scores from `score`.
        #[arg(long)]
        observed_scores: Option<PathBuf>,
        /// Also write every resample's score.
        #[arg(long)]
        resample_scores: bool,
    },
}

fn load_config(common: &Common) -> parasim::Result<ConfigFile> {
    let mut cfg = match &common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        cfg.study.master_seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn apply_score_flags(cfg: &mut ConfigFile, flags: &ScoreFlags) {
    if let Some(d) = flags.delta {
        cfg.score.delta = d;
    }
    if let Some(g) = flags.gamma {
        cfg.score.gamma = g;
    }
}

fn parse_list(s: &str) -> parasim::Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("grid value `{x}` is not a number")))
        })
        .collect()
}

fn parse_grid(s: &str) -> parasim::Result<(Vec<f64>, Option<Vec<f64>>)> {
    match s.split_once(':') {
        Some((d, g)) => Ok((parse_list(d)?, Some(parse_list(g)?))),
        None => Ok((parse_list(s)?, None)),
    }
}

fn load_trajectories(path: &Path, cfg: &ConfigFile) -> parasim::Result<io::TrajectoryTable> {
    let mut table = io::read_trajectory_table(path)?;
    io::standardize(&mut table.trajectories, &cfg.standardization)?;
    Ok(table)
}

fn load_coefficients(path: &Path) -> parasim::Result<HashMap<String, parasim::bayes::FittedModel>> {
    io::read_json::<CoefficientsFile>(path)?.fitted_by_user()
}

fn out_file(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(name))
}

fn cmd_synth(common: Common) -> anyhow::Result<()> {
    let cfg = load_config(&common)?;
    let prov = cfg.provenance(cfg.synth.seed);
    let trial = generate_trial(&cfg.synth)?;
    let path = out_file(&common.out_dir, "trajectories.csv")?;
    io::write_trajectories(fs::File::create(&path)?, &trial, &prov)?;
    let rows: usize = trial.iter().map(|t| t.horizon()).sum();
    io::write_json(
        &common.out_dir.join("synth_manifest.json"),
        &serde_json::json!({
            "master_seed": prov.master_seed,
            "config_hash": prov.config_hash,
            "users": trial.len(),
            "rows": rows,
            "spec": cfg.synth,
        }),
    )?;
    eprintln!("wrote {} rows for {} users to {}", rows, trial.len(), path.display());
    Ok(())
}

fn cmd_fit(trajectories: PathBuf, common: Common) -> anyhow::Result<()> {
    let cfg = load_config(&common)?;
    let algo = cfg.algorithm_config()?;
    let table = load_trajectories(&trajectories, &cfg)?;
    let mut file = CoefficientsFile {
        provenance: cfg.provenance(cfg.study.master_seed),
        users: Vec::new(),
        excluded: Vec::new(),
    };
    for traj in &table.trajectories {
        match fit_with_noise_estimate(traj, &algo.prior, cfg.study.noise_var) {
            Ok(m) => file.users.push(UserCoefficients::new(&traj.user_id, &m)),
            Err(e) => file.excluded.push(ExcludedUser {
                user_id: traj.user_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let path = out_file(&common.out_dir, "coefficients.json")?;
    io::write_json(&path, &file)?;
    eprintln!(
        "fitted {} users ({} excluded) to {}",
        file.users.len(),
        file.excluded.len(),
        path.display()
    );
    Ok(())
}

fn cmd_score(
    trajectories: PathBuf,
    common: Common,
    flags: ScoreFlags,
    coefficients: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    apply_score_flags(&mut cfg, &flags);
    cfg.validate()?;
    let algo = cfg.algorithm_config()?;
    let table = load_trajectories(&trajectories, &cfg)?;
    let fits = coefficients.as_deref().map(load_coefficients).transpose()?;
    let score = cfg.score;

    let mut results: Vec<ScoreResult> = Vec::new();
    for (i, traj) in table.trajectories.iter().enumerate() {
        let summary: parasim::Result<ScoreSummary> = match &table.forecasts {
            Some(forecasts) => {
                let stream = AdvantageStream {
                    user_id: traj.user_id.clone(),
                    contexts: traj.points.iter().map(|p| p.context).collect(),
                    forecasts: forecasts[i].clone(),
                    update_log: traj.update_log.clone(),
                };
                score_summary(&stream, score.kind, score.smoothing)
            }
            None => {
                let fitted = match fits.as_ref().and_then(|f| f.get(&traj.user_id)) {
                    Some(f) => Ok(*f),
                    None => fit_with_noise_estimate(traj, &algo.prior, cfg.study.noise_var),
                };
                fitted.and_then(|f| observed_summary(traj, &f, &algo, &score))
            }
        };
        match summary {
            Ok(s) => results.push(s.result(&traj.user_id, score.delta, score.gamma)),
            Err(e) => eprintln!("warning: user `{}` not scored: {e}", traj.user_id),
        }
    }
    let path = out_file(&common.out_dir, "scores.csv")?;
    io::write_scores(fs::File::create(&path)?, &results, &cfg.provenance(cfg.study.master_seed))?;
    eprintln!("scored {} users to {}", results.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_study(
    trajectories: PathBuf,
    common: Common,
    flags: ScoreFlags,
    workers: Option<usize>,
    ground_truth: Option<GroundTruthKind>,
    grid: Option<String>,
    coefficients: Option<PathBuf>,
    observed_scores: Option<PathBuf>,
    resample_scores: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    apply_score_flags(&mut cfg, &flags);
    if let Some(w) = workers {
        cfg.study.workers = w;
    }
    if let Some(g) = ground_truth {
        cfg.study.ground_truth = g;
    }
    if let Some(g) = grid {
        let (deltas, gammas) = parse_grid(&g)?;
        cfg.study.delta_grid = Some(deltas);
        if gammas.is_some() {
            cfg.study.gamma_grid = gammas;
        }
    }
    cfg.study.write_resample_scores |= resample_scores;
    cfg.validate()?;
    let study = cfg.study_config()?;
    let prov = cfg.provenance(cfg.study.master_seed);

    let table = load_trajectories(&trajectories, &cfg)?;
    let fits = coefficients.as_deref().map(load_coefficients).transpose()?;
    let observed = observed_scores.as_deref().map(io::read_scores).transpose()?;
    let inputs: Vec<UserInput<'_>> = table
        .trajectories
        .iter()
        .map(|t| UserInput {
            trajectory: t,
            fitted: fits.as_ref().and_then(|f| f.get(&t.user_id)),
            observed: observed.as_ref().and_then(|o| o.get(&t.user_id).copied()),
        })
        .collect();

    let data = simulate(&inputs, &study)?;
    let result = summarize(&data, &study)?;
    io::write_study_bundle(&common.out_dir, &data, &result, &cfg, &prov)?;
    eprintln!(
        "observed numint {} (count percentile {}), {} users, {} excluded, {} runs",
        result.observed.numint,
        result.count_percentile,
        result.users.len(),
        result.excluded.len(),
        result.runs_executed
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Fit {
            trajectories,
            common,
        } => cmd_fit(trajectories, common),
        Command::Score {
            trajectories,
            common,
            score,
            coefficients,
        } => cmd_score(trajectories, common, score, coefficients),
        Command::Study {
            trajectories,
            common,
            score,
            workers,
            ground_truth,
            grid,
            coefficients,
            observed_scores,
            resample_scores,
        } => cmd_study(
            trajectories,
            common,
            score,
            workers,
            ground_truth,
            grid,
            coefficients,
            observed_scores,
            resample_scores,
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
