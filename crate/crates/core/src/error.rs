use std::path::PathBuf;

/// Errors produced by the forecasting library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty context")]
    EmptyContext,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{len} is not divisible by {divisor}")]
    NotDivisible { len: usize, divisor: usize },

    #[error("series of length {len} exceeds target length {target}")]
    TooLong { len: usize, target: usize },

    #[error("series '{id}' is too short: length {len}, need at least {min}")]
    TooShort { id: String, len: usize, min: usize },

    #[error("non-finite value in series '{id}' at index {index}")]
    NonFiniteInput { id: String, index: usize },

    #[error("weights sum to {sum}, expected 1")]
    WeightsNotNormalized { sum: f64 },

    #[error("covariance is not positive definite (last jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite {what} at step {step} (batch: {batch:?})")]
    NonFiniteTraining {
        what: &'static str,
        step: usize,
        batch: Vec<String>,
    },

    #[error("non-finite forecast at generation step {step}")]
    NonFiniteForecast { step: usize },

    #[error("quantile level {requested} is not available; trained levels: {available:?}")]
    UnknownQuantile { requested: f64, available: Vec<f64> },

    #[error("checkpoint mismatch in field `{field}`: {detail}")]
    CheckpointMismatch { field: String, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or malformed input rather
    /// than a failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Config(_)
                | Error::LengthMismatch { .. }
                | Error::NotDivisible { .. }
                | Error::TooLong { .. }
                | Error::UnknownQuantile { .. }
                | Error::CheckpointMismatch { .. }
                | Error::WeightsNotNormalized { .. }
                | Error::Toml(_)
        )
    }
}
