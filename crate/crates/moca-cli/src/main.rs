//! `moca` — experiment runner for the changepoint-filtering meta-learner.
//!
//! Subcommands: `train`, `eval`, `bandit`, `sweep`, `gradcheck`, `gen`.
//! Exit codes: 0 success, 1 usage or file problems, 2 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid config, missing files. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// The computation itself went wrong (non-finite losses, degenerate
    /// beliefs, failed checks). Exit code 2.
    #[error("{0}")]
    Failure(String),
}

impl From<moca::MocaError> for CliError {
    fn from(e: moca::MocaError) -> Self {
        match e {
            moca::MocaError::Numerical(_) | moca::MocaError::DegenerateBelief(_) => {
                CliError::Failure(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failure(_) => 2,
        }
    }
}

/// Changepoint-aware meta-learning experiments: train models, compare
/// conditioning strategies, play contextual bandits, sweep hazard rates.
#[derive(Parser)]
#[command(name = "moca", version, about)]
struct Cli {
    /// Worker threads (default: the MOCA_THREADS env var, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model; writes a checkpoint, training curve, and manifest.
    Train(TrainArgs),
    /// Score a checkpoint against the baseline agents on fresh streams.
    Eval(EvalArgs),
    /// Play contextual-bandit trials with a trained reward model.
    Bandit(EvalArgs),
    /// Train and evaluate once per hazard rate in the sweep grid.
    Sweep(SweepArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export raw benchmark streams as CSV files.
    Gen(GenArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `[output] dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training hazard rate.
    #[arg(long)]
    hazard: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `[output] dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load (default: `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the evaluation hazard rate.
    #[arg(long)]
    hazard: Option<f64>,
    /// Comma-separated agent labels, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    /// Override the number of evaluation streams.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the stream length.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `[output] dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training seed used at every sweep point.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated agent labels, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    /// Override the number of evaluation trials per sweep point.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the stream length per sweep point.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seed for the probe models and streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Self-test hook: corrupt this parameter's analytic gradient and expect
    /// the checker to report a failure.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
pub struct GenArgs {
    /// Experiment TOML file (the `[train]` section picks the environment).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `[output] dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the first stream (default: the training seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the stream hazard rate.
    #[arg(long)]
    hazard: Option<f64>,
    /// Number of streams to export.
    #[arg(long)]
    trials: Option<usize>,
    /// Steps per stream (default: the evaluation horizon).
    #[arg(long)]
    horizon: Option<usize>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Bandit(args) => commands::cmd_bandit(args),
        Command::Sweep(args) => commands::cmd_sweep(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
        Command::Gen(args) => commands::cmd_gen(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MOCA_THREADS") {
            Ok(s) => Some(s.parse::<usize>().map_err(|_| {
                CliError::Usage(format!("MOCA_THREADS must be a positive integer, got {s:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}
