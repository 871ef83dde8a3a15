use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("projection direction has near-zero norm ({norm:e})")]
    ZeroDirection { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside valid range {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("degenerate transition at t={t}: denominator {denominator:e}")]
    DegenerateTransition { t: usize, denominator: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid condition: {0}")]
    InvalidCondition(String),

    #[error("unknown degradation kind `{0}`")]
    UnknownDegradation(String),

    #[error("predictor does not support {0}")]
    Unsupported(&'static str),

    #[error("invalid guidance spec: {0}")]
    InvalidSpec(String),

    #[error("guidance direction vanishes at t={t} (|delta eps| = {norm:e})")]
    ZeroGuidanceDirection { t: usize, norm: f64 },

    #[error("inconsistent trajectory at step t={t}: {detail}")]
    InconsistentTrajectory { t: usize, detail: String },

    #[error("no calibratable steps in trajectory ({skipped} skipped)")]
    NoCalibratableSteps { skipped: usize },

    #[error("winning rate needs at least one comparison triple")]
    EmptyTriples,

    #[error("metric `{metric}` returned non-finite score {value}")]
    NonFiniteScore { metric: String, value: f64 },

    #[error("external scorer failed: {0}")]
    ExternalScorer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that come from bad user input rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingFile(_)
                | Error::InvalidSchedule(_)
                | Error::InvalidMixture(_)
                | Error::InvalidCondition(_)
                | Error::InvalidSpec(_)
                | Error::UnknownDegradation(_)
        )
    }
}
