use std::process::ExitCode;

/// Failure of a command, mapped onto the process exit code.
///
/// `Display` is a single line starting with a fixed reason prefix, so callers
/// can split on the first `:`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config-error: {0}")]
    Config(String),
    #[error("check-failed: {0}")]
    Check(String),
    #[error("numeric-error: {0}")]
    Numeric(String),
    #[error("io-error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(one_line(msg))
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(one_line(format!("{}: {err}", path.display())))
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) | CliError::Io(_) => 3,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

impl From<conform_core::Error> for CliError {
    fn from(e: conform_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(one_line(e))
        } else {
            CliError::Numeric(one_line(e))
        }
    }
}

fn one_line(msg: impl std::fmt::Display) -> String {
    msg.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub type CliResult<T> = std::result::Result<T, CliError>;
