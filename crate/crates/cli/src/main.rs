//! `artic`: synthesize, prepare, train, fine-tune, evaluate and plot.

mod commands;
mod config;
mod plot;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Options;
use crate::config::RunConfig;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Missing, malformed or inconsistent data (exit 2).
    Data(String),
    /// NaN or infinity detected (exit 3).
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
            Self::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<artic::Error> for CliError {
    fn from(e: artic::Error) -> Self {
        match e {
            artic::Error::NonFinite(_) => Self::Numeric(e.to_string()),
            artic::Error::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "artic", version, about = "Articulatory trajectory estimation from phonemes and acoustics")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs and rebuild caches.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory, overriding the configured one for this command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject corpus.
    Synth,
    /// Filter, resample and normalize trajectories and cache all feature kinds.
    Prep,
    /// Train a generic or subject-dependent model and evaluate it on the test split.
    Train,
    /// Adapt a generic checkpoint to each subject (or `data.subject`).
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint, or a directory of predicted trajectory CSVs, on the test split.
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory with one `<id>.csv` per test utterance.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Align predictions to references with DTW before scoring.
        #[arg(long)]
        dtw: bool,
    },
    /// Write predicted trajectories in physical units.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Utterances to predict; defaults to the test split.
        #[arg(long = "utterance")]
        utterances: Vec<String>,
    },
    /// Trajectory and attention figures for one utterance.
    Plot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        utterance: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let config = match cli.seed {
        Some(s) => config.with_seed(s),
        None => config.resolve_seed(),
    };
    let opts = Options {
        config,
        force: cli.force,
        out: cli.out,
    };
    match &cli.command {
        Command::Synth => commands::synth(&opts),
        Command::Prep => commands::prep(&opts),
        Command::Train => commands::train_cmd(&opts),
        Command::Finetune { checkpoint } => commands::finetune(&opts, checkpoint.as_deref()),
        Command::Eval { checkpoint, predictions, dtw } => commands::eval(&opts, checkpoint.as_deref(), predictions.as_deref(), *dtw),
        Command::Infer { checkpoint, utterances } => commands::infer(&opts, checkpoint.as_deref(), utterances),
        Command::Plot { checkpoint, utterance } => commands::plot_cmd(&opts, checkpoint.as_deref(), utterance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
