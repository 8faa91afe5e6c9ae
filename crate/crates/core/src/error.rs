use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the crate can surface. Display strings carry a module
/// prefix so CLI messages are categorized without extra plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("tensor: backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("layers: dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("model: invalid config: {0}")]
    InvalidConfig(String),
    #[error("model: config is not decomposable: {0}")]
    ConfigNotDecomposable(&'static str),
    #[error("model: checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: parse error at row {row}, column {col}: {value:?}")]
    Parse { row: usize, col: usize, value: String },
    #[error("data: missing value at row {row}, column {col}")]
    MissingValue { row: usize, col: usize },
    #[error("data: variate {0} has zero variance on the fitting range")]
    ZeroVariance(usize),
    #[error("data: range of length {len} too short for windows needing {needed}")]
    RangeTooShort { len: usize, needed: usize },
    #[error("data: empty split: {0}")]
    EmptySplit(&'static str),

    #[error("metrics: {metric} undefined at index {index} (zero denominator)")]
    DivisionDomain { metric: &'static str, index: usize },
    #[error("metrics: MASE naive denominator is zero")]
    ZeroDenominator,
    #[error("metrics: series of length {len} too short for seasonality {m}")]
    SeriesTooShort { len: usize, m: usize },
    #[error("metrics: quantile {0} outside (0, 1)")]
    InvalidQuantile(f64),

    #[error("ensemble: covariance not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("ensemble: block count {0} must be even for the variance bound")]
    OddL(usize),

    #[error("cli: unknown flag or key {0:?}")]
    UnknownFlag(String),
    #[error("cli: missing config: {0}")]
    MissingConfig(String),
    #[error("cli: invalid value for {key}: {value:?}")]
    InvalidValue { key: String, value: String },
    #[error("cli: assertion failed: {0}")]
    Assertion(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("io: csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Module category, used for process exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::AxisOutOfRange { .. } | Error::NotScalar(_) => {
                "tensor"
            }
            Error::InvalidRate(_) => "layers",
            Error::InvalidConfig(_) | Error::ConfigNotDecomposable(_) | Error::Checkpoint(_) => {
                "model"
            }
            Error::Parse { .. }
            | Error::MissingValue { .. }
            | Error::ZeroVariance(_)
            | Error::RangeTooShort { .. }
            | Error::EmptySplit(_) => "data",
            Error::DivisionDomain { .. }
            | Error::ZeroDenominator
            | Error::SeriesTooShort { .. }
            | Error::InvalidQuantile(_) => "metrics",
            Error::NotPsd(_) | Error::OddL(_) => "ensemble",
            Error::UnknownFlag(_)
            | Error::MissingConfig(_)
            | Error::InvalidValue { .. }
            | Error::Assertion(_) => "cli",
            Error::Io { .. } | Error::Csv(_) => "io",
        }
    }
}
