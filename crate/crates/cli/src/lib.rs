//! Library half of the `routelab` command-line tool.

pub mod args;
pub mod commands;
pub mod plots;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Outcome;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Route(a) => commands::route_cmd(a),
        Command::Verify(a) => commands::verify_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Compare(a) => commands::compare_cmd(a),
        Command::Report(a) => commands::report_cmd(a),
    }
}

/// Parses `argv` and runs it: 0 on success, 1 when a checked property fails,
/// 2 on usage, input or I/O errors.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match dispatch(&cli) {
        Ok(Outcome::Success) => ExitCode::from(EXIT_OK),
        Ok(Outcome::PropertyFailure) => ExitCode::from(EXIT_PROPERTY_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
