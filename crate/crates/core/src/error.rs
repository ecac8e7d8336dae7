use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain [{0}, {1}]: start must be below end")]
    InvalidDomain(f64, f64),
    #[error("invalid spline order {0}: must be at least 1")]
    InvalidOrder(usize),
    #[error("point {x} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("derivative of order {deriv} is not supported by a basis of order {order}")]
    UnsupportedDerivative { deriv: usize, order: usize },
    #[error("invalid breakpoint grid: {0}")]
    InvalidGrid(String),
    #[error("sample contains no curves")]
    EmptySample,
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("inconsistent grid: {0}")]
    InconsistentGrid(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("linear system is singular even after jitter regularization")]
    SingularSystem,
    #[error("invalid penalty weights: {0}")]
    InvalidWeights(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("search failed: every evaluation errored ({})", .0.join("; "))]
    SearchFailed(Vec<String>),
    #[error("cannot calibrate noise scale: {0}")]
    CannotCalibrate(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("benchmark failed: {0}")]
    BenchmarkFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-parsable identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDomain(..) => "invalid-domain",
            Error::InvalidOrder(_) => "invalid-order",
            Error::OutOfDomain { .. } => "out-of-domain",
            Error::UnsupportedDerivative { .. } => "unsupported-derivative",
            Error::InvalidGrid(_) => "invalid-grid",
            Error::EmptySample => "empty-sample",
            Error::DomainMismatch(_) => "domain-mismatch",
            Error::InconsistentGrid(_) => "inconsistent-grid",
            Error::Parse { .. } => "parse-error",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::SingularSystem => "singular-system",
            Error::InvalidWeights(_) => "invalid-weights",
            Error::InsufficientData(_) => "insufficient-data",
            Error::SearchFailed(_) => "search-failed",
            Error::CannotCalibrate(_) => "cannot-calibrate",
            Error::UnknownScenario(_) => "unknown-scenario",
            Error::InvalidConfig(_) => "invalid-config",
            Error::BenchmarkFailed(_) => "benchmark-failed",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "input-not-found",
            Error::Io(_) => "io-error",
            Error::Csv(e) => match e.kind() {
                csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "input-not-found",
                _ => "csv-error",
            },
        }
    }
}
