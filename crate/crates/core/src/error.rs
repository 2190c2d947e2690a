use thiserror::Error;

pub type Result<T, E = MaqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MaqError {
    /// Shapes, dimensions, or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation invoked outside its contract (stepping a finished
    /// episode, sampling an empty buffer, stale caches, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite losses or gradients during optimization.
    #[error("training error: {0}")]
    Training(String),

    /// Scripted demonstration could not be made to succeed.
    #[error("generator error: {0}")]
    Generator(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: String,
        expected: u32,
        found: String,
    },

    /// A persisted artifact does not match what the caller expects.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MaqError {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        MaqError::Parse {
            line,
            message: message.into(),
        }
    }
}
