use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod io;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, configuration or input data (exit 2).
    Config(String),
    /// Estimation failed (exit 1).
    Numerical(eqsw_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl From<eqsw_core::Error> for CliError {
    fn from(e: eqsw_core::Error) -> Self {
        CliError::Numerical(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "eqsw", version, about = "Sandwich variances for estimating equations with estimated nuisance parameters")]
struct Cli {
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true, env = "EQSW_THREADS")]
    threads: Option<usize>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an estimator and report every variance estimate.
    Fit(Common),
    /// Run a Monte Carlo study on a scenario.
    Simulate(Common),
    /// Percentile bootstrap intervals.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        /// Number of resamples.
        #[arg(long)]
        b: Option<usize>,
        /// Confidence level.
        #[arg(long)]
        level: Option<f64>,
    },
    /// Check the empirical score identities at the fitted point.
    Diagnose(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn })
        .parse_env("EQSW_LOG")
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("configuration error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(c) => commands::fit(c, cli.quiet),
        Command::Simulate(c) => commands::simulate(c, cli.quiet),
        Command::Bootstrap { common, b, level } => commands::bootstrap(common, *b, *level, cli.quiet),
        Command::Diagnose(c) => commands::diagnose(c, cli.quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
