//! `tsnmt` — one binary covering the whole workflow: synthetic corpus
//! generation, training with the ablation flags, beam-search translation,
//! BLEU evaluation, correction diagnostics, gradient checks, and
//! hyperparameter sweeps.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, config conflicts),
//! 2 runtime failure (I/O, numeric divergence, failed gradient check).

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl From<tsnmt_core::Error> for CliError {
    fn from(err: tsnmt_core::Error) -> Self {
        match err {
            tsnmt_core::Error::InvalidConfig(_) => CliError::Usage(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

#[derive(Parser)]
#[command(name = "tsnmt", version, about = "Two-stream NMT toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus
    Synth(SynthArgs),
    /// Train a model, writing metrics and checkpoints
    Train(TrainArgs),
    /// Translate a source file with a trained checkpoint
    Translate(TranslateArgs),
    /// Score hypotheses against references (BLEU, exact match)
    Eval(EvalArgs),
    /// Probe content-stream error correction under forced corruption
    Diagnose(DiagnoseArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train once per value of one hyperparameter
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Task kind: lexicon, reversal, or noisy_lexicon
    #[arg(long)]
    task: String,
    /// Distinct surface tokens per side
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    /// Longest sentence, in tokens
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Number of sentence pairs
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for source.txt, target.txt, and the manifest
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (flat `key = value`); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for metrics.csv, checkpoints, vocabularies, manifest
    #[arg(long)]
    out: PathBuf,
    /// Training source corpus (overrides train.source)
    #[arg(long)]
    source: Option<PathBuf>,
    /// Training target corpus (overrides train.target)
    #[arg(long)]
    target: Option<PathBuf>,
    /// Validation source corpus (overrides train.valid_source)
    #[arg(long)]
    valid_source: Option<PathBuf>,
    /// Validation target corpus (overrides train.valid_target)
    #[arg(long)]
    valid_target: Option<PathBuf>,
    /// Continue from a checkpoint written by an identical configuration
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Drop the error-correction loss
    #[arg(long)]
    no_ecm: bool,
    /// Drop scheduled sampling (pure teacher forcing)
    #[arg(long)]
    no_ss: bool,
    /// Train a conventional one-stream decoder
    #[arg(long)]
    standard_decoder: bool,
    /// Correction loss weight (train.lambda)
    #[arg(long)]
    lambda: Option<f64>,
    /// Sampling start step (schedule.alpha)
    #[arg(long)]
    alpha: Option<u64>,
    /// Keep-probability floor (schedule.beta)
    #[arg(long)]
    beta: Option<f64>,
    /// Decay temperature (schedule.mu)
    #[arg(long)]
    mu: Option<f64>,
    /// Optimization steps (train.steps)
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source text, one sentence per line
    #[arg(long)]
    input: PathBuf,
    /// Hypothesis file to write
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Length-penalty exponent; 0 ranks by raw log-probability
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Cap on emitted tokens per sentence
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Hypotheses per sentence; > 1 switches to `index ||| text ||| score` rows
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Source vocabulary (default: vocab.src next to the checkpoint)
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    /// Target vocabulary (default: vocab.tgt next to the checkpoint)
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
    /// Manifest directory (default: the output file's directory)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hypotheses: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Detailed report file (`key: value` per line)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Manifest directory (default: the report's directory, else `.`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source side of the probe corpus
    #[arg(long)]
    source: PathBuf,
    /// Target side (ground truth before corruption)
    #[arg(long)]
    target: PathBuf,
    /// Fraction of target tokens replaced before the diagnostic
    #[arg(long, default_value_t = 0.15)]
    corruption_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the manifest
    #[arg(long)]
    out: PathBuf,
    /// Detailed report file (`key: value` per line)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Source vocabulary (default: vocab.src next to the checkpoint)
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    /// Target vocabulary (default: vocab.tgt next to the checkpoint)
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error accepted per parameter element
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Manifest directory (default: `.`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Hyperparameter to vary: lambda, alpha, or beta
    #[arg(long)]
    param: String,
    /// Comma-separated values, one training run each
    #[arg(long)]
    values: String,
    /// Config file shared by every run
    #[arg(long)]
    base_config: PathBuf,
    /// Directory for per-run subdirectories and sweep.csv
    #[arg(long)]
    out: PathBuf,
    /// Concurrent training runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides train.seed for every run
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
