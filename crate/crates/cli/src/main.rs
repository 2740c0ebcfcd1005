//! `phase`: command-line entry point.

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};

mod args;
mod commands;

use args::Cli;
use phase_core::error::ErrorClass;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

fn usage_error(err: clap::Error, argv: &[OsString]) -> ExitCode {
    use clap::error::ErrorKind;
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = err.print();
            return if err.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
        _ => {}
    }
    let _ = err.print();
    if err.kind() == ErrorKind::UnknownArgument {
        // List the flags of the subcommand the user was reaching for.
        let mut cmd = Cli::command();
        let name = argv
            .iter()
            .skip(1)
            .filter_map(|a| a.to_str())
            .find(|a| cmd.find_subcommand(a).is_some())
            .map(str::to_string);
        let target = match name {
            Some(n) => cmd.find_subcommand_mut(&n).expect("found above").clone(),
            None => cmd,
        };
        eprintln!("\nvalid flags:");
        for arg in target.get_arguments() {
            if let Some(long) = arg.get_long() {
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                eprintln!("  --{long:<22} {help}");
            }
        }
    }
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => return usage_error(e, &argv),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Numeric => EXIT_NUMERIC,
                ErrorClass::Data => EXIT_DATA,
            })
        }
    }
}
