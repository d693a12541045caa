use std::process::ExitCode;

use clap::Parser;
use lider_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(root) => {
            println!("results written to {}", root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lider: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
