use std::process::ExitCode;

use clap::Parser;
use nemb::cli::{run, Cli, EXIT_INVALID};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NEMB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli.command).map_err(anyhow::Error::from) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID as u8)
        }
    }
}
