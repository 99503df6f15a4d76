//! `cate`: simulate data, fit CATE estimators, bootstrap intervals and
//! analyze the estimates.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 invalid input
//! data or unreadable files, 3 estimation failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cate_core::CateError;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cate",
    version,
    about = "Conditional average treatment effect estimation"
)]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true, env = "CATE_THREADS")]
    threads: Option<usize>,

    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a simulated dataset with known effects (data.csv, truth.csv, config.json).
    Simulate(SimulateArgs),
    /// Estimate CATEs with the chosen methods (cate_<M>.csv, report.json).
    Fit(FitArgs),
    /// Bootstrap confidence intervals for the chosen methods.
    Bootstrap(BootstrapArgs),
    /// Sorted effects, CLAN, method correlation and IPW balance tables.
    Analyze(AnalyzeArgs),
    /// Cross-fitted versus single R-learner second stage on the step-effect design.
    Figure3(Figure3Args),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// 1: randomized (e = 0.5); 2: confounded.
    #[arg(long)]
    propensity_setting: Option<u8>,
    /// 1: linear; 2: nonlinear; 3: step effect.
    #[arg(long)]
    effect_setting: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    /// Categorical columns to expand into dummies (comma separated).
    #[arg(long, value_delimiter = ',')]
    one_hot: Option<Vec<String>>,
}

#[derive(Debug, Args, Clone)]
struct EstimatorArgs {
    /// Methods to run, comma separated: S,T,X,DR,R,IPW,CF.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    clip_epsilon: Option<f64>,
    /// Master seed for folds and learners.
    #[arg(long)]
    seed: Option<u64>,
    /// Fit the DR/R/IPW second stage on the full sample instead of cross-fitting.
    #[arg(long)]
    in_sample: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// truth.csv from `simulate`; adds per-method MSE to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the fitted causal forests as JSON tree dumps.
    #[arg(long)]
    save_forests: bool,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap replicates B.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Use percentile instead of normal intervals.
    #[arg(long)]
    percentile: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory holding cate_<M>.csv files (and nuisances.csv if present).
    #[arg(long)]
    dir: PathBuf,
    /// Output directory (default: --dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Methods to analyze (default: every cate_<M>.csv found).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// CLAN group share.
    #[arg(long)]
    q: Option<f64>,
    /// CLAN confidence level.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct Figure3Args {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    replications: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
}

fn exit_code(e: &CateError) -> u8 {
    match e {
        CateError::InvalidArgument(_) => 1,
        CateError::Io { .. } => 2,
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
