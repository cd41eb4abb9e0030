use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = dcmt::cli::Cli::parse();
    match dcmt::cli::run(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
