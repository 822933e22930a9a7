use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("column {0} has a degenerate robust scale")]
    DegenerateColumn(usize),
    #[error("row {0} has no observed cells")]
    EmptyRow(usize),
    #[error("scale estimate is zero")]
    ScaleZero,
    #[error("rank {rank} is too large for a {n} x {d} matrix")]
    RankTooLarge { rank: usize, n: usize, d: usize },
    #[error("too few points ({n}) for a {k}-dimensional MCD with coverage {alpha}")]
    TooFewPoints { n: usize, k: usize, alpha: f64 },
    #[error("subset covariance is singular")]
    SingularSubset,
    #[error("normalizer of the orthogonal scatter vanished")]
    NormalizerZero,
    #[error("linear system is singular or ill-conditioned (condition number {0:e})")]
    SingularSystem(f64),
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("point has no observed cells")]
    AllMissingPoint,
    #[error("fold {0} is too small")]
    FoldTooSmall(usize),
    #[error("indirect inference produced a non-finite iterate")]
    NonFiniteIterate,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
