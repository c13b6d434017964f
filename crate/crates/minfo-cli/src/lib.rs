//! Command-line companion for the `minfo-core` solver: on-disk file
//! formats, the five commands, and exit-code discipline.

pub mod commands;
pub mod formats;

use std::fmt;

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag values or flag combinations; exit code 1.
    Usage(String),
    /// Invalid input files, models, or setups; exit code 2.
    Validation(String),
    /// The solver or a downstream computation fell short; exit code 3.
    NonConvergence(String),
}

impl CliError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::NonConvergence(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Validation(msg) => write!(f, "invalid input: {msg}"),
            CliError::NonConvergence(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}
