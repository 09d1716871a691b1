use serde::Serialize;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] babel_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(babel_core::Error::Io {
            path: Default::default(),
            source: e,
        })
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Check(_) => "check_failed",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// The line written to stderr on failure.
#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub status: &'static str,
    pub kind: &'a str,
    pub command: Option<&'a str>,
    pub message: String,
}
