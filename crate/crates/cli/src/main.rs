//! `compseg`: data generation, training, evaluation and the experiment
//! suites, driven by one TOML config per run.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "compseg", version, about = "Compensation learning for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test splits of the configured scene family.
    Generate(Args),
    /// Train the configured method and export checkpoint, history and B.
    Train {
        #[command(flatten)]
        args: Args,
        /// Finite-difference audit of the gradients before training.
        #[arg(long)]
        gradcheck: bool,
    },
    /// Confusion matrix, IoU and accuracies of a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// beta, sigma^2, u and e maps of every test image as PGM.
    Uncertainty(CheckpointArgs),
    /// Label-correction curves and their AUC per ranking.
    Correction {
        #[command(flatten)]
        args: Args,
        /// Score this checkpoint instead of training one model per seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// mIoU of every method and seed across label-noise levels.
    NoiseSweep(Args),
    /// Predictions with the manual bias, plus an optional boost sweep.
    BiasInfer(CheckpointArgs),
    /// Mean |e(k) - e(K)| for each configured k.
    KSweep(CheckpointArgs),
    /// Mean model uncertainty with and without compensation.
    Memorization(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(clap::Args)]
struct CheckpointArgs {
    #[command(flatten)]
    args: Args,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Core(compseg_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use compseg_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Data(_) | CliError::Core(E::Data(_) | E::Dimension(_) | E::Io(_)) => 2,
            CliError::Numeric(_) | CliError::Core(E::Numeric { .. } | E::UndefinedMetric(_)) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<compseg_core::Error> for CliError {
    fn from(e: compseg_core::Error) -> Self {
        CliError::Core(e)
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a.config),
        Command::Train { args, gradcheck } => commands::train(&args.config, gradcheck),
        Command::Eval(a) => commands::eval(&a.args.config, &a.checkpoint),
        Command::Uncertainty(a) => commands::uncertainty(&a.args.config, &a.checkpoint),
        Command::Correction { args, checkpoint } => commands::correction(&args.config, checkpoint.as_deref()),
        Command::NoiseSweep(a) => commands::noise_sweep(&a.config),
        Command::BiasInfer(a) => commands::bias_infer(&a.args.config, &a.checkpoint),
        Command::KSweep(a) => commands::k_sweep(&a.args.config, &a.checkpoint),
        Command::Memorization(a) => commands::memorization(&a.config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("compseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
