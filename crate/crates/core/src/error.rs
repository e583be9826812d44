use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    /// The backend answered, but the body could not be understood.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("refusing to enumerate {count} trajectories (limit {limit})")]
    TooLarge { count: u128, limit: u64 },

    #[error("rollout {index} failed: {source}")]
    Rollout {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("search failed at step {step}: {message}")]
    Search { step: usize, message: String },

    #[error("construction failed at step {step}: {message}")]
    Construction { step: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error{}: {message}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Validation { line: Option<usize>, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("non-finite value in {block}")]
    Numeric { block: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation { line: None, message: msg.into() }
    }
}
