//! Library side of the `nncert` command: configuration, commands and exit
//! codes. `main.rs` only parses arguments and maps errors to exit codes.

pub mod commands;
pub mod config;

use std::fmt;

/// A failed command, classified by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or input content: exit 1.
    Config(anyhow::Error),
    /// Unreadable input or unwritable output: exit 2.
    Io(anyhow::Error),
    /// At least one oracle report failed: exit 3.
    OracleFailed { failed: Vec<String> },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::OracleFailed { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Io(e) => write!(f, "i/o error: {e:#}"),
            CliError::OracleFailed { failed } => {
                write!(f, "oracle check failed: {}", failed.join(", "))
            }
        }
    }
}

impl std::error::Error for CliError {}
