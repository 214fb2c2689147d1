//! `physlatent` command-line driver.
//!
//! Exit codes:
//!
//! | code | meaning                                             |
//! |------|-----------------------------------------------------|
//! | 0    | success                                             |
//! | 1    | other failure                                       |
//! | 2    | invalid command line                                |
//! | 3    | invalid configuration                               |
//! | 4    | file system error                                   |
//! | 5    | malformed file or incompatible checkpoint           |
//! | 6    | numerical failure (divergence, aborted training)    |
//! | 7    | output directory not empty and `--force` not given  |

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use physlatent::Error;

use manifest::OutputExists;

#[derive(Parser, Debug)]
#[command(name = "physlatent", version, about = "Reduced-resolution flow simulation with a learned latent space")]
pub struct Cli {
    /// Worker thread cap.
    #[arg(long, global = true, env = "PHYSLATENT_THREADS")]
    pub threads: Option<usize>,
    /// Root for relative output directories.
    #[arg(long, global = true, env = "PHYSLATENT_OUT_ROOT")]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a reference dataset.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Overrides the seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Checkpoint whose networks start the run (warm start, or the frozen
        /// upstream model of super-resolution training).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint and the reduced-solver baseline on a dataset.
    Evaluate {
        /// Checkpoint file, or `baseline` for the plain reduced solver.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// First evaluated frame; the scenario default when absent.
        #[arg(long)]
        start: Option<usize>,
        /// Evaluated steps; the scenario default when absent.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore a fine trajectory from one reference frame.
    Rollout {
        #[arg(long)]
        checkpoint: String,
        /// `frames.bin` of a simulation inside a dataset directory.
        #[arg(long)]
        frame: PathBuf,
        /// Frame index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        steps: usize,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time a checkpoint, the baseline and the fine reference solver.
    Benchmark {
        #[arg(long)]
        checkpoint: String,
        /// Dataset providing the scenario and the initial frame.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Directory for `runtime.csv` and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Validation,
    All,
}

fn exit_code(e: &(dyn std::error::Error + 'static)) -> u8 {
    if e.is::<OutputExists>() {
        return 7;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 3,
        Some(Error::Io { .. }) => 4,
        Some(Error::FormatError { .. } | Error::IncompatibleCheckpoint(_)) => 5,
        Some(
            Error::NumericalFailure { .. }
            | Error::PoissonDivergence { .. }
            | Error::RolloutDiverged { .. }
            | Error::SimulationFailed { .. }
            | Error::TrainingAborted(_)
            | Error::DegenerateBaseline,
        ) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread cap not applied: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(e.as_ref()))
        }
    }
}
