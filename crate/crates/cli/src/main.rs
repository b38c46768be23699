use std::process::ExitCode;

use clap::Parser;
use tsfound_cli::{configure_threads, run, Cli, EXIT_VALIDATION};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION as u8 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
