//! Command-line driver for the synthetic filament super-resolution pipeline.

pub mod commands;
pub mod config;
pub mod measure;
pub mod reproduce;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use commands::Cli;
pub use config::{load_config, validate_config, RunConfig, Violation};
pub use reproduce::{reproduce, ReproduceReport};

/// Environment variable that fixes the worker-thread count.
pub const WORKERS_ENV: &str = "FILAMENT_SR_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] filament_core::Error),
    #[error(transparent)]
    Anet(#[from] filament_anet::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

/// Worker count from the environment, then the configuration.
pub fn worker_count(configured: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{WORKERS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(configured),
    }
}

/// Runs `f` on a pool of the requested size, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Parses `argv` (program name first) and runs one subcommand.
///
/// Returns the process exit code: 0 on success, 2 for usage errors and 1 for
/// failures inside a pipeline stage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
