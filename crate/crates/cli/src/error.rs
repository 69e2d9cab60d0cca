use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] combinet::Error),
    /// A replay whose artifacts differ from the recorded run.
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(combinet::Error::NonFiniteGradient { .. } | combinet::Error::NonFiniteLoss { .. }) => {
                EXIT_NUMERIC
            }
            CliError::Mismatch(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub type CliResult<T> = std::result::Result<T, CliError>;
