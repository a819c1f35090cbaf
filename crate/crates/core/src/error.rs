use thiserror::Error;

/// Errors raised by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("NaN encountered in {0}")]
    NanInput(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("non-finite state at step {step}")]
    Divergence { step: usize },

    #[error("every row of the window is masked")]
    DegenerateWindow,

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("{diverged} of {total} ensemble rollouts diverged")]
    EnsembleFailure { diverged: usize, total: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
