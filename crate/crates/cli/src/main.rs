use std::process::ExitCode;

use clap::Parser;
use toc_align_cli::{execute, Cli};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
