use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the resampling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in feature `{field}` at decision time {t}")]
    NonFiniteFeature { field: &'static str, t: usize },

    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid trajectory for user `{user_id}`: {reason}")]
    InvalidTrajectory { user_id: String, reason: String },

    #[error("covariance is numerically singular during the update for day {day}")]
    SingularCovariance { day: usize },

    #[error("non-finite reward in the day {day} update batch")]
    NonFiniteReward { day: usize },

    #[error("degenerate advantage variance f'Σf = {0:e}")]
    DegenerateVariance(f64),

    #[error("user `{user_id}` has no available, non-missing decision times to fit")]
    NoUsablePoints { user_id: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid feature `{0}`")]
    InvalidFeature(String),

    #[error("simulation failed at decision time {t} (day {day}): {source}")]
    Simulation {
        t: usize,
        day: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no posterior snapshot for day {day}")]
    MissingSnapshot { day: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("user `{user_id}` has no resample with a defined score")]
    NoUsableResamples { user_id: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}", format_row_errors(.0))]
    Rows(Vec<Error>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn format_row_errors(errors: &[Error]) -> String {
    let mut out = format!("{} malformed row(s)", errors.len());
    for e in errors {
        out.push_str("\n  ");
        out.push_str(&e.to_string());
    }
    out
}

impl Error {
    /// True for errors caused by bad inputs (as opposed to numerical failures).
    /// A missing input file counts as bad input.
    pub fn is_validation(&self) -> bool {
        if let Error::Io(e) = self {
            return e.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            Error::NonFiniteFeature { .. }
                | Error::InvalidProbability(_)
                | Error::InvalidTrajectory { .. }
                | Error::DimensionMismatch { .. }
                | Error::InvalidFeature(_)
                | Error::EmptyInput(_)
                | Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::Rows(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Toml(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
