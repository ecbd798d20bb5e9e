//! The `volnet` command-line tool: configuration, commands and run logs.

pub mod commands;
pub mod config;
pub mod trainlog;

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

pub use commands::{exit_code, run, Command, Status, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK};
pub use config::{Overrides, RunConfig};

pub const THREADS_ENV: &str = "VOLNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "volnet", version, about = "Train and evaluate 3D CT volume classifiers")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Run configuration (flat key = value file).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data-loading workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Reduced channels and 16x32x32 inputs.
    #[arg(long)]
    pub tiny: bool,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, workers: self.workers, tiny: self.tiny }
    }
}

/// Size the global kernel pool from `VOLNET_THREADS` when set.
pub fn init_threads(value: Option<&str>) -> volnet_core::Result<()> {
    let Some(raw) = value else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| volnet_core::Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| volnet_core::Error::Config(format!("cannot size thread pool: {e}")))
}

/// Parse the config, run the command and map the result to an exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = RunConfig::load(&cli.config, &cli.overrides()).and_then(|cfg| run(cli.command, &cfg, out));
    match result {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::ChecksFailed) => {
            eprintln!("error: gradient checks failed");
            EXIT_NUMERIC
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
