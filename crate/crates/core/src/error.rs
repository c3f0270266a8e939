use std::path::PathBuf;

/// Errors surfaced by the translation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible alignment: {frames} frames cannot emit a target needing {needed}")]
    InfeasibleAlignment { frames: usize, needed: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("model diverged at step {step}: {what} is not finite")]
    Divergence { step: u64, what: String },

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for contract violations, which the CLI maps to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
