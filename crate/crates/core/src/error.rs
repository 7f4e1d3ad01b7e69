use thiserror::Error;

/// Errors produced by the density-estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("domain mismatch between grid functions")]
    DomainMismatch,

    #[error("non-finite value at grid index {0}")]
    NonFinite(usize),

    #[error("density is not normalized: integral = {0}")]
    NotNormalized(f64),

    #[error("density has a nonpositive value {value} at grid index {index}")]
    NonPositiveDensity { index: usize, value: f64 },

    #[error("empty sample")]
    EmptySample,

    #[error("observation {value} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("invalid bandwidth {0}")]
    InvalidBandwidth(f64),

    #[error("sample has zero spread; bandwidth undefined")]
    ZeroSpread,

    #[error("density is numerically unrepresentable (log range {0} exceeds 700)")]
    Overflow(f64),

    #[error("need at least {needed} trajectories, got {got}")]
    TooFewTrajectories { needed: usize, got: usize },

    #[error("component count {k} out of range (1..={max})")]
    ComponentOutOfRange { k: usize, max: usize },

    #[error("parameter dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("maximum likelihood estimate does not exist: {0}")]
    NonExistence(String),

    #[error("Newton solver failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("matrix inversion failed: {0}")]
    Singular(String),

    #[error("prior variance for component {0} is not positive")]
    ZeroPriorVariance(usize),

    #[error("no candidate dimension could be fitted")]
    AllFitsFailed,

    #[error("divergence is infinite: reference density positive where the approximation vanishes (grid index {0})")]
    InfiniteDivergence(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("refit {index} failed: {source}")]
    Refit { index: usize, source: Box<Error> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("observations must be strictly positive for log scaling, got {0}")]
    NonPositiveObservation(f64),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
