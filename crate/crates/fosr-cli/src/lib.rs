//! Command-line surface: fit, tune, simulate, bands, and benchmark subcommands,
//! with deterministic CSV artifacts and a manifest per run.

pub mod commands;
pub mod io;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "fosr", version, about = "Function-on-scalar regression with locally sparse coefficients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the weighted group bridge model at a fixed (lambda, alpha).
    Fit(FitArgs),
    /// Grid search over (lambda, alpha) scored by the adjusted EBIC.
    Tune(TuneArgs),
    /// Generate a synthetic dataset from the benchmark scenario.
    Simulate(SimulateArgs),
    /// Fit and compute simultaneous confidence bands (optionally a suppression test).
    Bands(BandsArgs),
    /// Run the replication benchmark and emit summary tables.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightsMode {
    /// Estimate the covariance and use W = Sigma^{-1/2}.
    Estimated,
    /// Use W = I.
    Identity,
}

#[derive(clap::Args, Debug)]
pub struct DataArgs {
    /// Response matrix CSV (n x T, header row).
    #[arg(long = "Y")]
    pub y: PathBuf,
    /// Design matrix CSV (n x p, header row).
    #[arg(long = "X")]
    pub x: PathBuf,
    /// Metadata JSON with the time grid and phase boundaries.
    #[arg(long)]
    pub meta: PathBuf,
    /// Prepend a column of ones to the design matrix.
    #[arg(long, default_value_t = false)]
    pub intercept: bool,
}

#[derive(clap::Args, Debug)]
pub struct BasisArgs {
    /// Number of B-spline basis functions.
    #[arg(long = "K", default_value_t = 30)]
    pub k: usize,
    /// Spline order (degree + 1).
    #[arg(long = "q", default_value_t = 4)]
    pub q: usize,
}

#[derive(clap::Args, Debug)]
pub struct SolverArgs {
    /// Outer iterations of the nested solver.
    #[arg(long = "S1", default_value_t = 20)]
    pub s1: usize,
    /// ADMM steps per outer iteration.
    #[arg(long = "S2", default_value_t = 50)]
    pub s2: usize,
    #[arg(long, value_enum, default_value_t = WeightsMode::Estimated)]
    pub weights: WeightsMode,
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    /// Seed recorded in the manifest and used by every randomized step.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs are identical for any value.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(clap::Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub basis: BasisArgs,
    /// Grid resolution as "LAMBDASxALPHAS", log-linear in [0.1, 100] and linear
    /// in [0.05, 0.95].
    #[arg(long, default_value = "100x18")]
    pub grid: String,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CaseArg {
    Base,
    Case1,
    Case2,
    Case3,
}

#[derive(clap::Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = CaseArg::Base)]
    pub case: CaseArg,
    /// Override the coefficient scale.
    #[arg(long)]
    pub c0: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(clap::Args, Debug)]
pub struct BandsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub basis: BasisArgs,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Band confidence level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Max-t simulation draws.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    /// Suppression-test window as "start,end" in grid time units, applied to
    /// the coefficient given by --coef.
    #[arg(long)]
    pub window: Option<String>,
    /// Coefficient index for the suppression test (default: the last one).
    #[arg(long)]
    pub coef: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(clap::Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = CaseArg::Base)]
    pub case: CaseArg,
    #[arg(long)]
    pub c0: Option<f64>,
    /// Number of seeded replications.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Comma-separated list: proposed,unweighted,alpha1,gls,twostep.
    #[arg(long, default_value = "proposed")]
    pub methods: String,
    /// Basis size; defaults to 30, or 40 for case1.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "q", default_value_t = 4)]
    pub q: usize,
    /// Tuning grid resolution "LAMBDASxALPHAS".
    #[arg(long, default_value = "30x10")]
    pub grid: String,
    /// Band draws per replication.
    #[arg(long, default_value_t = 4000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Execute a parsed command inside a thread pool of the requested size.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = match &cli.command {
        Command::Fit(a) => a.run.threads,
        Command::Tune(a) => a.run.threads,
        Command::Simulate(a) => a.run.threads,
        Command::Bands(a) => a.run.threads,
        Command::Benchmark(a) => a.run.threads,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build()?;
    pool.install(|| match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Tune(args) => commands::tune(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Bands(args) => commands::bands(&args),
        Command::Benchmark(args) => commands::benchmark(&args),
    })
}
