use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = awi_service::cli::Cli::parse();
    match awi_service::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
