use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ditar_core::Error> for CliError {
    fn from(e: ditar_core::Error) -> Self {
        use ditar_core::Error as E;
        match e {
            E::NonFinite { .. } | E::Singular { .. } => CliError::Numeric(e.to_string()),
            E::Format(_) | E::Io(_) | E::Json(_) => CliError::Data(e.to_string()),
            E::Shape { .. } | E::InvalidArgument(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
