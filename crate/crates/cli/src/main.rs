//! `sadnet`: command-line driver. Exit codes: 0 success, 1 usage or
//! validation error, 2 runtime or format error.

mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use sadnet::Error;

use cli::{Cli, Command};

fn run(cli: Cli) -> sadnet::Result<()> {
    match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Sadpoint(args) => commands::sadpoint(&args),
        Command::Escape { run, from_checkpoint } => commands::escape(&run, &from_checkpoint),
        Command::Analyze { runs_dir, out_dir } => commands::analyze(&runs_dir, &out_dir),
        Command::Gradcheck { seed, models } => commands::gradcheck(seed, models),
        Command::Fixtures { out_dir, train, test, seed } => commands::fixtures(&out_dir, train, test, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { last_finite: Some(row), .. } = &e {
                eprintln!("last finite epoch: {}", serde_json::to_string(row).unwrap_or_default());
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
