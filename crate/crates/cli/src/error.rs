use beamprm::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{failed} of {total} problems failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("manifest check failed: {0}")]
    Mismatch(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::TooManyFailures { .. } => 3,
            CliError::Mismatch(_) => 4,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

pub fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Usage(_) | CoreError::Unsupported(_) | CoreError::TooLarge { .. } => 2,
        CoreError::Backend { .. }
        | CoreError::Protocol(_)
        | CoreError::Rollout { .. }
        | CoreError::Search { .. }
        | CoreError::Construction { .. } => 3,
        CoreError::Parse { .. }
        | CoreError::Validation { .. }
        | CoreError::Version { .. }
        | CoreError::Io(_)
        | CoreError::Json(_) => 4,
        CoreError::Numeric { .. } | CoreError::Divergence { .. } => 5,
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(CliError::usage("x").exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::Protocol("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(CoreError::Version { found: 2, expected: 1 }).exit_code(), 4);
        assert_eq!(CliError::Core(CoreError::Divergence { epoch: 0, batch: 1 }).exit_code(), 5);
        assert_eq!(CliError::TooManyFailures { failed: 3, total: 20 }.exit_code(), 3);
    }
}
