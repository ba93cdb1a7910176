//! Batch CLI for ZIP/ZINB mixture clustering: `fit`, `simulate`, and
//! `evaluate` subcommands with reproducible seeds and run manifests.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod error;
mod evaluate;
mod fit;
mod manifest;
mod report;
mod simulate;

use error::CliError;

#[derive(Parser)]
#[command(
    name = "zimclust",
    version,
    about = "Cluster cell x gene count matrices with zero-inflated Poisson / negative binomial mixtures",
    after_help = "Set ZIMCLUST_THREADS to cap the worker count (0 = auto)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture model with multi-restart EM and pick K by AIC + elbow.
    Fit(FitArgs),
    /// Generate synthetic datasets from a named scenario or a config file.
    Simulate(SimulateArgs),
    /// Score a fit report against a simulation truth file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    /// ZIP mixture without covariates.
    Zip,
    /// ZIP mixture with a size-factor offset.
    ZipSf,
    /// ZIP mixture with covariates (size factors optional).
    ZipCov,
    /// ZINB mixture without covariates.
    Zinb,
    /// ZINB mixture with a size-factor offset.
    ZinbSf,
    /// ZINB mixture with covariates (size factors optional).
    ZinbCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Kmeans,
    Random,
    Both,
}

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    /// Count matrix: dense CSV, or Matrix Market triplet when the extension
    /// is .mtx (with sibling .rows/.cols id files).
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelChoice,
    /// Fixed number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// Inclusive candidate range A:B searched by the elbow rule.
    #[arg(long, value_name = "A:B")]
    pub k_range: Option<String>,
    #[arg(long, value_enum, default_value = "both")]
    pub init: InitChoice,
    /// Independent EM runs per (K, init); seeds are seed, seed+1, ...
    #[arg(long, default_value_t = 32)]
    pub restarts: usize,
    /// Stop an EM run when the log-likelihood increase drops to this value.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Covariate CSV (cell_id plus one column per covariate).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// 'compute' for per-cell totals of the raw matrix (taken before any
    /// gene filtering), or a cell_id,size_factor CSV.
    #[arg(long, value_name = "compute|PATH")]
    pub size_factors: Option<String>,
    /// Drop genes whose count IQR across cells is <= this threshold.
    #[arg(long, value_name = "THRESHOLD")]
    pub filter_iqr: Option<f64>,
    /// Keep the N genes with the highest count standard deviation.
    #[arg(long, value_name = "N")]
    pub top_sd: Option<usize>,
    /// Report path (JSON); labels and responsibilities CSVs land next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Scenario preset, e.g. zip/sc1 or zinb-sf/sc1.
    #[arg(long)]
    pub scenario: Option<String>,
    /// 1-based case index within the scenario.
    #[arg(long)]
    pub case: Option<usize>,
    /// Custom scenario config (JSON), alternative to --scenario.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Fit report JSON produced by `zimclust fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Truth JSON produced by `zimclust simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    match std::env::var("ZIMCLUST_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                CliError::Usage(format!("ZIMCLUST_THREADS must be an integer, got '{raw}'"))
            })?;
            if n > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Fit(args) => fit::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zimclust: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
