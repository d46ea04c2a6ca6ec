//! Library side of the `stagger` command: argument types, run configuration
//! and one function per subcommand. `main.rs` only parses and maps errors to
//! exit codes.

pub mod args;
pub mod commands;
pub mod config;
pub mod cost;
pub mod output;

use std::path::PathBuf;

use thiserror::Error;

pub use args::Cli;
pub use cost::{cost_projection, CostProjection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] stagger_core::Error),
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 1 estimation failure, 2 usage or input problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if !e.is_input_error() => 1,
            CliError::Write { .. } => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Run a parsed command line. Returns the files written.
pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    commands::dispatch(cli)
}
