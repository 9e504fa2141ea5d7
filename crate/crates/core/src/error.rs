use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty file: {0}")]
    EmptyFile(PathBuf),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("non-binary treatment value '{value}' at row {row}")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("non-numeric cell '{value}' in column '{column}' at row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("treatment group is empty")]
    NoTreated,
    #[error("control pool is empty")]
    NoControls,
    #[error("no caliper-feasible match for any treated unit (common support failure)")]
    NoFeasibleMatches,
    #[error("empty pair list")]
    EmptyPairs,
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("{failed} of {total} bootstrap replicates failed (limit {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: usize,
    },
    #[error("intercept calibration failed to reach prevalence {target} (got {achieved})")]
    Calibration { target: f64, achieved: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::EmptyFile(_) => "empty_file",
            Error::MissingColumn(_) => "missing_column",
            Error::NonBinaryTreatment { .. } => "non_binary_treatment",
            Error::NonNumeric { .. } => "non_numeric",
            Error::InvalidDataset(_) => "invalid_dataset",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NoTreated => "no_treated",
            Error::NoControls => "no_controls",
            Error::NoFeasibleMatches => "no_feasible_matches",
            Error::EmptyPairs => "empty_pairs",
            Error::TooFew { .. } => "too_few",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Calibration { .. } => "calibration",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
