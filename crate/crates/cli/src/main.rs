use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = reroof_cli::Cli::parse();
    match reroof_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
