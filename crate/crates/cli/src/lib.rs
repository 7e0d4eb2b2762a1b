//! The `avatar` command line and its HTTP server.

pub mod commands;
pub mod serve;

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

pub use commands::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable inputs, invalid configuration.
    #[error("{0}")]
    Config(String),
    /// Failures while doing the work.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Output goes to stdout; diagnostics to
/// stderr.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
