//! Command-line driver: training runs with CSV metrics and checkpoints,
//! checkpoint evaluation, the verification suite, learning-curve plots and
//! multi-process seed sweeps.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Shape(String),
    #[error("{path}: row {row}: {message}")]
    Data { path: String, row: u64, message: String },
    #[error("training aborted: {0}")]
    NonFinite(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("failed checks: {}", .0.join(", "))]
    VerifyFailed(Vec<String>),
    #[error("sweep run failed: {0}")]
    Sweep(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Shape(_) | CliError::Data { .. } => 2,
            CliError::NonFinite(_) => 3,
            CliError::VerifyFailed(_) | CliError::Train(_) | CliError::Sweep(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bsac", version, about = "Factorized soft actor-critic: train, evaluate, verify, plot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent and write metrics, evaluations and checkpoints.
    Train(TrainArgs),
    /// Deterministic episodic returns of a saved controller.
    Eval(EvalArgs),
    /// Run the convergence, gradient and density checks.
    Verify(VerifyArgs),
    /// Render learning curves from metrics files as SVG.
    Plot(PlotArgs),
    /// Train every topology × seed combination in separate processes and overlay the curves.
    Sweep(SweepArgs),
    /// Save the Riccati controller of a chain environment as a checkpoint.
    ExportLqr(ExportLqrArgs),
}

/// Settings shared by `train` and `sweep`. Flags shadow the config file,
/// which shadows the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    /// Total environment steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Any other config field, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Preset name or topology file.
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub metrics_flush_interval: Option<u64>,
    /// Write wall_ms as 0 so metrics files compare byte for byte.
    #[arg(long)]
    pub strip_timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop the tanh term from the densities under test.
    #[arg(long, hide = true)]
    pub corrupt_tanh_correction: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// metrics.csv files, one curve each.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "avg_return_100")]
    pub title: String,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Topologies to compare (repeatable).
    #[arg(long = "topology", required = true)]
    pub topologies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Concurrent training processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ExportLqrArgs {
    #[arg(long, default_value = "chain-lqr-3")]
    pub env: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::ExportLqr(a) => commands::export_lqr(&a),
    }
}
