//! The `qrnn` command-line driver.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qrnn::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Core(qrnn::Error::Config(msg.into()))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "qrnn", version, about = "Quasi-recurrent neural network toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the training subcommands.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.5`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, logs and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainArgs {
    /// Config file and `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(t) = self.threads {
            overrides.push(format!("run.threads={t}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("run.out={}", o.display()));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a language model on a text corpus.
    TrainLm(TrainArgs),
    /// Train a two-class document classifier on `label<TAB>text` files.
    TrainClassify(TrainArgs),
    /// Train an attentional encoder–decoder on aligned sentence files.
    TrainTranslate(TrainArgs),
    /// Translate every line of a file with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Vocabulary file; defaults to `vocab.json` beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        /// 0 means twice the source length plus ten.
        #[arg(long, default_value_t = 0)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Time QRNN against LSTM layers over a batch × length grid.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = qrnn::bench::GRID_BATCHES)]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = qrnn::bench::GRID_SEQLENS)]
        seqlens: Vec<usize>,
        #[arg(long, default_value_t = 320)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// qrnn-f, qrnn-fo or qrnn-ifo.
        #[arg(long, default_value = "qrnn-fo")]
        kind: String,
        /// inference or training.
        #[arg(long, default_value = "inference")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Emit the per-run records as JSON instead of the speedup CSV.
        #[arg(long)]
        json: bool,
        /// Profile a language-model training step instead of the grid.
        #[arg(long)]
        profile: bool,
        /// Vocabulary size for `--profile`.
        #[arg(long, default_value_t = 10000)]
        vocab: usize,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the last layer's hidden states over a text as CSV.
    DumpStates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    commands::dispatch(cli.command)
}
