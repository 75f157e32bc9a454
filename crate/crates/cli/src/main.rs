//! `pcq`: data preparation, training, evaluation and diagnostics.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcq_core::manifest::FoldStrategy;
use pcq_core::PcqError;

use overrides::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "pcq",
    version,
    about = "Speech emotion recognition with progressive channel queries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic band-separated corpus and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value = "iemocap4")]
        taxonomy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        folds: u8,
    },
    /// Cache spectrograms for every segment of a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log1p: bool,
    },
    /// Rewrite the fold column of a manifest.
    MakeFolds {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to overwriting the input manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        folds: u8,
        #[arg(long, value_enum, default_value_t = FoldBy::Speaker)]
        by: FoldBy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and save a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on the other folds and early-stop on this one.
        #[arg(long)]
        holdout_fold: Option<u8>,
        /// Per-epoch history as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict every clip of a manifest with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Predictions CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        emb_dir: Option<PathBuf>,
    },
    /// K-fold cross-validation.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Parameter counts of a block or model.
    Params {
        #[arg(long, value_enum, conflicts_with = "model")]
        block: Option<Block>,
        #[arg(long, requires = "block", num_args = 1.., value_delimiter = ',')]
        channels: Vec<usize>,
        #[arg(long, value_enum)]
        model: Option<Model>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Case names; all cases when omitted.
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Per-clip fusion vectors of a trained model as CSV.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        emb_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FoldBy {
    Speaker,
    Random,
}

impl From<FoldBy> for FoldStrategy {
    fn from(b: FoldBy) -> Self {
        match b {
            FoldBy::Speaker => FoldStrategy::Speaker,
            FoldBy::Random => FoldStrategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Block {
    Pdc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Model {
    Mlcnn,
    Pcq,
}

fn exit_code(e: &PcqError) -> u8 {
    match e {
        PcqError::Config(_) | PcqError::InvalidInput(_) | PcqError::Shape(_) => 2,
        PcqError::Data(_)
        | PcqError::MissingEmbedding(_)
        | PcqError::Io { .. }
        | PcqError::Json(_) => 3,
        PcqError::Numerical(_) | PcqError::CheckFailed(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
