use eightport::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    /// A computed invariant or acceptance gate did not hold.
    #[error("check failed: {0}")]
    Invariant(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invariant(_) => 2,
            CliError::Core(e) => match e {
                Error::TruncationInsufficient { .. }
                | Error::Resolution(_)
                | Error::DivisorThreshold { .. } => 3,
                Error::ZeroTrace(_) => 2,
                _ => 1,
            },
        }
    }
}
