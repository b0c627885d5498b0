use std::process::ExitCode;

use clap::Parser;
use tta_cli::{execute, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<CliError>() {
                Some(CliError::Incomplete { .. }) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
