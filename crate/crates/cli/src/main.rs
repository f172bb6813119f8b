use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tem_core::Error;

mod commands;

/// Topology-enhanced Transformer forecasting: training, evaluation and
/// layer-wise topology diagnostics.
#[derive(Debug, Parser)]
#[command(name = "tem", version, about)]
pub struct Cli {
    /// Sectioned key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Seed for model initialization and batch order (synthetic data seed for synth-data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes a checkpoint and a metrics CSV.
    Train,
    /// Test-split MSE/MAE of a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer HSIC and distortion curves.
    Diagnose {
        /// Trained checkpoint; a freshly initialized model is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second checkpoint to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Activation dump files (index 0 = input tokens) instead of a model.
        #[arg(long, num_args = 1.., conflicts_with_all = ["checkpoint", "compare"])]
        dumps: Vec<PathBuf>,
    },
    /// Write a synthetic sum-of-sinusoids dataset as CSV.
    SynthData,
    /// Finite-difference checks of autodiff and the bi-level outer gradient.
    Gradcheck,
}

/// 0 success, 1 usage, 2 data, 3 numerical.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Unsupported(_) | Error::Shape { .. } => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
