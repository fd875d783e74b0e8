use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the interpolant domain [{start}, {end}]")]
    Domain { t: f64, start: f64, end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("posterior is singular at time {t} (sigma_t = 0)")]
    SingularTime { t: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    #[error("unsupported primitive in loss graph: {0}")]
    UnsupportedPrimitive(String),

    #[error("invalid sampling schedule: {0}")]
    InvalidSchedule(String),

    #[error("zero vector passed where a direction is required")]
    ZeroVector,

    #[error("empty window: {0}")]
    EmptyWindow(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
