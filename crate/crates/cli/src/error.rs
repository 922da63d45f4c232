use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation: missing or malformed flags, unreadable config.
    #[error("{0}")]
    Usage(String),

    /// Anything that went wrong with the data or models themselves.
    #[error(transparent)]
    Data(#[from] rrsearch::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}
