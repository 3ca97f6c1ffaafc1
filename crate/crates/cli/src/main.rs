//! `dmll`: generate data, build embedding files, train, evaluate, verify and
//! report. Every command first prints its effective configuration as one JSON
//! line on stdout; results follow as further JSON lines. Usage errors exit
//! with status 2, failures with status 1 and a JSON error on stderr.

mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
