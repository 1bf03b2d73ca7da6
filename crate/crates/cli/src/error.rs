use thiserror::Error;

/// CLI failure, split by who has to fix it.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, flags or inputs. Exit code 2.
    #[error("{0}")]
    Config(String),
    /// Anything else. Exit code 1.
    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Internal(_) => 1,
        }
    }
}

impl From<chunkkv::Error> for CliError {
    fn from(e: chunkkv::Error) -> Self {
        // every core input is derived from the config, so rejected
        // arguments are the user's to fix
        match e {
            chunkkv::Error::InvalidArgument(_) | chunkkv::Error::Overflow(_) => {
                Self::Config(e.to_string())
            }
            chunkkv::Error::Internal(_) => Self::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Internal(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Internal(format!("csv: {e}"))
    }
}
