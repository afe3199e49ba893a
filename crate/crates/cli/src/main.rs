//! `mcreg`: multiple-testing regularized covariance estimation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::CliError;

#[derive(Debug, Parser)]
#[command(name = "mcreg", version, about = "Regularized covariance estimation by Monte Carlo multiple testing")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// TOML file with flat keys; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Multiplicity-adjusted p-values for every pairwise correlation.
    AdjustPvalues(TestArgs),
    /// Thresholded, positive definite covariance estimate.
    Regularize(RegularizeArgs),
    /// Monte Carlo error rates, power and losses over an experiment grid.
    Simulate(SimulateArgs),
    /// Rolling GMV portfolio back-test.
    Backtest(BacktestArgs),
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Returns CSV: `date` column then one column per asset.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// `ss`, `sd`, `sd:k=sqrt`, `ss:k=5`, `sd:fdp=0.1`, ...
    #[arg(long)]
    pub procedure: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Resampling replications B, counting the observed sample.
    #[arg(short = 'B', long = "replications")]
    pub resamples: Option<usize>,
    /// `mean` (subtract sample means) or `zero` (returns already centered).
    #[arg(long)]
    pub centering: Option<String>,
    /// Also write the raw null distribution to this file.
    #[arg(long)]
    pub dump_null: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegularizeArgs {
    #[command(flatten)]
    pub test: TestArgs,
    /// Eigenvalue floor for the shrinkage step.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated asset counts.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub t: Option<Vec<usize>>,
    /// Comma-separated fractions of assets loading on the common factor.
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    /// `normal`, `t6`, `t12`, ...
    #[arg(long, value_delimiter = ',')]
    pub innovation: Option<Vec<String>>,
    /// Comma-separated procedures, e.g. `ss,sd,bps:a,bps:b,sd:fdp=0.1`.
    #[arg(long, value_delimiter = ',')]
    pub procedures: Option<Vec<String>>,
    /// Outer Monte Carlo replications.
    #[arg(short = 'R', long = "outer")]
    pub replications: Option<usize>,
    /// Resampling replications B per test.
    #[arg(short = 'B', long = "replications")]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Add a BPS rule whose critical value is calibrated on the true nulls.
    #[arg(long)]
    pub size_adjusted_bps: bool,
    /// Report the Frobenius loss of each regularized correlation estimate.
    #[arg(long)]
    pub frobenius: bool,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated strategies: `sample`, `ls`, `ew`, `vt`, `bps:b`, `sd:k=sqrt`, `ss:fdp=0.1`, ...
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<String>>,
    /// Estimation window length.
    #[arg(long)]
    pub window: Option<usize>,
    /// Days between rebalances.
    #[arg(long)]
    pub holding: Option<usize>,
    /// Proportional transaction cost.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Forbid short sales.
    #[arg(long)]
    pub no_short_sales: bool,
    /// Row (0-based) of the first formation day.
    #[arg(long)]
    pub initial_index: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(short = 'B', long = "replications")]
    pub resamples: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let table = config::load_table(cli.config.as_deref())?;
    let common = config::Common::resolve(&table, cli.seed, cli.workers, cli.out)?;
    if let Some(w) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?;
    }
    let started = std::time::Instant::now();
    let name = match &cli.command {
        Command::AdjustPvalues(a) => {
            commands::adjust_pvalues(&table, &common, a)?;
            "adjust-pvalues"
        }
        Command::Regularize(a) => {
            commands::regularize(&table, &common, a)?;
            "regularize"
        }
        Command::Simulate(a) => {
            commands::simulate(&table, &common, a)?;
            "simulate"
        }
        Command::Backtest(a) => {
            commands::backtest(&table, &common, a)?;
            "backtest"
        }
    };
    commands::write_log(&common, name, started.elapsed())?;
    Ok(())
}
