//! `kcal`: train a projection, calibrate a KDE classifier, and evaluate it.
//!
//! Exit codes: 0 success, 2 invalid input or arguments, 3 numerical failure.
//! `KCAL_THREADS` caps the worker pool.

mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("KCAL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("KCAL_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("kcal: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kcal: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
