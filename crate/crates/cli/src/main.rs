//! `theme-survey` — train, classify, survey, evaluate, profile, and
//! generate corpora from one binary.  Commands are deterministic given
//! their inputs (the only randomness lives behind `synth --seed`);
//! output files have sorted keys so reruns are byte-identical.
//!
//! Exit codes: 0 on success, 2 for bad invocations (missing inputs,
//! unknown names), 1 for runtime failures.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = config::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<config::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
