//! CLI error type carrying the process exit code: 2 for input problems,
//! 3 for numerical failures.

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Numerical(_) => ExitCode::from(3),
            _ => ExitCode::from(2),
        }
    }
}

impl From<gpmoe_core::Error> for CliError {
    fn from(e: gpmoe_core::Error) -> Self {
        match e {
            gpmoe_core::Error::Numerical(m) => CliError::Numerical(m.to_string()),
            gpmoe_core::Error::Input(m) => CliError::Input(format!("invalid input: {m}")),
            gpmoe_core::Error::State(m) => CliError::Input(format!("invalid state: {m}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
