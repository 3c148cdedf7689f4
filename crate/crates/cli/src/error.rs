use std::fmt;
use std::process::ExitCode;

/// `Usage` exits with 2, `Runtime` with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(fedids::Error),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<fedids::Error> for CliError {
    fn from(e: fedids::Error) -> Self {
        CliError::Runtime(e)
    }
}
