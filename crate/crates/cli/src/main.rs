//! `percept`: one binary for every pipeline stage. Exit code 0 on success,
//! 1 on validation errors (bad flags, missing or malformed inputs), 2 on
//! runtime failures.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

/// Error classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<percept_core::Error> for Failure {
    fn from(e: percept_core::Error) -> Self {
        let missing_input =
            matches!(&e, percept_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
        if e.is_validation() || missing_input {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<percept_service::ServiceError> for Failure {
    fn from(e: percept_service::ServiceError) -> Self {
        if e.status.is_client_error() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
