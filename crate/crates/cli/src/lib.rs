//! Command-line front end: runs the service, trains the crawler in batch,
//! replays scripted classroom scenarios and fits CSV data offline.

pub mod cli;
pub mod error;
pub mod scenario;
pub mod tabular;
pub mod train;

use std::ffi::OsString;

use clap::Parser;

pub use error::{CliError, EXIT_DATA, EXIT_RUNTIME, EXIT_USAGE};

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("BRICKS_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match cli::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging();
    match cli::execute(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bricks: {e}");
            e.exit_code()
        }
    }
}
