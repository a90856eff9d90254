//! `gridsep` — synthesize the corpus, train, evaluate, and run the
//! separator from the command line.
//!
//! `GRIDSEP_THREADS` caps the worker pool used for corpus synthesis and
//! evaluation; the default is the machine's parallelism.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gridsep", version, about = "Two-speaker separation in the time-frequency domain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (manifests plus WAV files).
    SynthData {
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Training utterances.
        #[arg(long, default_value_t = 500)]
        train: usize,
        /// Validation utterances.
        #[arg(long, default_value_t = 100)]
        valid: usize,
        /// Test utterances.
        #[arg(long, default_value_t = 100)]
        test: usize,
        /// Base seed; every utterance derives from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model, writing checkpoints and a log to --out.
    Train {
        /// Run config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory from synth-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and train.log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the effective config (defaults filled in) and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Report SI-SDR metrics for a checkpoint on one corpus split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory from synth-data.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train, valid, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the TSV report (default: next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Separate one mixture WAV into per-speaker WAVs.
    Separate {
        /// Checkpoint to run.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input mixture (must match the model's sample rate).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output prefix; writes <prefix>.spk1.wav, <prefix>.spk2.wav, ...
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Run a built-in self-check suite.
    Verify {
        /// One of: gradcheck, params, stft, losses.
        #[arg(long)]
        suite: String,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GRIDSEP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("GRIDSEP_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the worker pool")?;
    }
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    match Cli::parse().cmd {
        Cmd::SynthData { out, train, valid, test, seed, force } => {
            commands::synth_data(&out, train, valid, test, seed, force)
        }
        Cmd::Train { config, data, out, resume, print_config } => {
            commands::train(&config, &data, &out, resume.as_deref(), print_config)
        }
        Cmd::Eval { ckpt, data, split, report } => {
            commands::eval(&ckpt, &data, &split, report.as_deref())
        }
        Cmd::Separate { ckpt, input, out_prefix } => {
            commands::separate(&ckpt, &input, &out_prefix)
        }
        Cmd::Verify { suite } => commands::verify(&suite),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridsep: {e:#}");
            ExitCode::FAILURE
        }
    }
}
