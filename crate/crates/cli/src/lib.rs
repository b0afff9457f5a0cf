//! The `ps3` command line: synthetic cohorts, prototype construction,
//! k-fold training and evaluation.
//!
//! A run directory (`--out`) collects every stage:
//!
//! ```text
//! prototypes/  slides/<id>.ps3e  em/<id>.csv  reports/<id>.ps3e
//!              report_lengths.csv  settings.json
//! train/       fold_<k>.ckpt  history.csv  predictions.csv  summary.csv
//!              effective_config.json
//! eval/        metrics.csv  km.csv  logrank.csv  attention_summary.csv
//! ```

pub mod args;
pub mod cohort;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use args::Cli;
pub use config::RunConfig;
pub use error::CliError;

use clap::Parser;

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::run(cli)
}

/// Parses `argv` (program name first) and runs it; parse failures become
/// [`CliError::Usage`].
pub fn run_args<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}
