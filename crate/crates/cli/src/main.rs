//! `switchdiff` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or input error,
//! 3 numerical failure, 4 model assumptions not satisfied.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use switchdiff::Error;

use crate::args::Cli;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_ASSUMPTION: u8 = 4;

/// Failure of a subcommand, already classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// The model was built but failed its assumption checks.
    Assumptions(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Assumptions(_) => EXIT_ASSUMPTION,
            Failure::Core(e) => classify(e),
        }
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::Constraint(_) | Error::Reducible { .. } => EXIT_ASSUMPTION,
        Error::Trajectory { source, .. } => classify(source),
        e if e.is_user_error() => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Assumptions(msg) => eprintln!("assumption check failed: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
