//! `asmil` command-line driver.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asmil::AsmilError;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<AsmilError> for CliError {
    fn from(e: AsmilError) -> Self {
        match e {
            AsmilError::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "asmil",
    version,
    about = "Attention-stabilized MIL training and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config; writes metrics, attention trace and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Summarize attention drift and concentration from an attention trace.
    Diagnose(DiagnoseArgs),
    /// Check the normalized-sigmoid bounds and single-temperature softmax limits.
    VerifyTheorem(VerifyArgs),
    /// Generate a synthetic bag dataset.
    GenData(GenDataArgs),
    /// Count bags whose instances are affinely dependent.
    AffineCheck(AffineArgs),
    /// Convert a dataset to the bag text format.
    Convert(ConvertArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bagds")]
    pub format: String,
    /// Also write one prediction per bag as JSON lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Attention trace (`attention.jsonl`) from `train`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = asmil::diagnostics::STABILITY_WINDOW)]
    pub window: usize,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub high: usize,
    #[arg(long)]
    pub low: usize,
    #[arg(long, default_value_t = 0)]
    pub mid: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub n_bags: usize,
    #[arg(long, default_value_t = 8)]
    pub min_instances: usize,
    #[arg(long, default_value_t = 16)]
    pub max_instances: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub witness_rate: f64,
    #[arg(long, default_value_t = 2.0)]
    pub signal_shift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AffineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bagds")]
    pub format: String,
    #[arg(long, default_value_t = asmil::diagnostics::AFFINE_TOLERANCE)]
    pub tol: f64,
}

#[derive(Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Input layout: musk, bag-csv, svmlight-bag or bagds.
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run::train(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Diagnose(a) => run::diagnose(&a),
        Command::VerifyTheorem(a) => run::verify_theorem(&a),
        Command::GenData(a) => run::gen_data(&a),
        Command::AffineCheck(a) => run::affine_check(&a),
        Command::Convert(a) => run::convert(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
