use std::process::ExitCode;

use clap::Parser;
use dbenet_cli::{execute, Cli};

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    match execute(Cli::parse(), &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
