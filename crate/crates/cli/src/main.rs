mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "fedids",
    version,
    about = "Federated intrusion-detection simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flow dataset.
    Synth(SynthArgs),
    /// Train and save a byte-level BPE tokenizer.
    Tokenizer(TokenizerArgs),
    /// Centralized training.
    Train(TrainArgs),
    /// Federated simulation.
    Fed(FedArgs),
    /// Post-training int8 quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Metrics, parameter accounting and latency for a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub fields: usize,
    #[arg(long, default_value_t = 500)]
    pub rows_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub values_per_field: usize,
    /// Output CSV; a `.manifest.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by everything that reads an experiment config.
#[derive(Args, Default)]
pub struct CommonArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Stratified subsample of the input applied on load.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Default)]
pub struct ModelArgs {
    /// Start from the desk-scale model (L=2, H=64, A=2, FFN=256, S=64, V=512).
    #[arg(long)]
    pub mini: bool,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub intermediate: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TokenizerArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct FedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long, conflicts_with = "iid")]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iid: bool,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    /// Cap on concurrently training clients; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `default`, `none`, or a comma-separated list of tensor names.
    #[arg(long, default_value = "default")]
    pub policy: String,
    /// CSV for the paired accuracy check.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Evaluate on every row instead of the checkpoint's test split.
    #[arg(long)]
    pub all_rows: bool,
    /// Report path; defaults to the output with a `.report.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub all_rows: bool,
    /// Also measure single-example latency.
    #[arg(long)]
    pub time: bool,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Also write the document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Confusion matrix CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = &self.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(l) = &self.label_column {
            cfg.data.label_column = l.clone();
        }
        if let Some(f) = self.train_fraction {
            cfg.data.train_fraction = f;
        }
        if let Some(f) = self.sample_fraction {
            cfg.data.fraction = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        self.apply(&mut cfg);
        Ok(cfg)
    }
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let m = &mut cfg.model;
        if self.mini {
            *m = fedids::model::ModelConfig {
                dropout: m.dropout,
                ..fedids::model::ModelConfig::mini(m.num_classes)
            };
        }
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.num_layers, self.layers);
        set(&mut m.hidden, self.hidden);
        set(&mut m.heads, self.heads);
        set(&mut m.intermediate, self.intermediate);
        set(&mut m.seq_len, self.seq_len);
        set(&mut m.vocab_size, self.vocab);
        set(&mut cfg.training.batch_size, self.batch_size);
        if let Some(d) = self.dropout {
            m.dropout = d;
        }
        if let Some(lr) = self.lr {
            cfg.training.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            cfg.training.weight_decay = wd;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = Some(o.clone());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Tokenizer(a) => commands::tokenizer(&a),
        Command::Train(a) => commands::train(&a),
        Command::Fed(a) => commands::fed(&a),
        Command::Quantize(a) => commands::quantize(&a),
        Command::Eval(a) => commands::eval(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
