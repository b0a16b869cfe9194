//! `advchar` command-line interface: dataset generation, training, attacks,
//! transferability and study export.
//!
//! Every flag can also be set in an optional TOML config file (`--config`);
//! explicit flags override the file. All randomness flows from `--seed`.
//! Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use advchar_core::error::{Error, ErrorCategory, Result};
use advchar_core::Float;

#[derive(Parser)]
#[command(
    name = "advchar",
    version,
    about = "Character-level adversarial attacks on a small char-level text classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-keyword dataset (train/dev/test + label map)
    Gen(GenArgs),
    /// Train the character-level classifier and save a checkpoint
    Train(TrainArgs),
    /// Attack a trained model and write per-example records plus summaries
    Attack(AttackArgs),
    /// Evaluate adversarial texts against a second (blackbox) checkpoint
    Transfer(TransferArgs),
    /// Export a mixed clean/adversarial two-label study file with answer key
    ExportHumanEval(ExportHumanEvalArgs),
    /// Export the checkpoint vocabulary as text, one character per line
    ExportVocab(ExportVocabArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional TOML config mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Alphabet size [default: 200]
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Training examples per class [default: 500]
    #[arg(long)]
    per_class: Option<usize>,
    /// Dev examples per class [default: 125]
    #[arg(long)]
    per_class_dev: Option<usize>,
    /// Test examples per class [default: 125]
    #[arg(long)]
    per_class_test: Option<usize>,
    /// Planted keywords per class [default: 3]
    #[arg(long)]
    keywords_per_class: Option<usize>,
    /// Minimum text length [default: 10]
    #[arg(long)]
    len_min: Option<usize>,
    /// Maximum text length [default: 20]
    #[arg(long)]
    len_max: Option<usize>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory with train.jsonl, dev.jsonl and label_map.json
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for model.ckpt and train_log.csv
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding/hidden width [default: 64]
    #[arg(long)]
    d_c: Option<usize>,
    /// Encoder layers [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width [default: 128]
    #[arg(long)]
    d_ff: Option<usize>,
    /// Maximum text length in characters [default: 64]
    #[arg(long)]
    max_len: Option<usize>,
    /// Minimum character frequency for the vocabulary [default: 1]
    #[arg(long)]
    min_freq: Option<u64>,
    /// Batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<Float>,
    /// Maximum epochs [default: 20]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 3]
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(clap::Args)]
struct AttackArgs {
    /// Trained checkpoint to attack
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test set JSONL
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for records and summaries
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attack method: advchar or baseline [default: advchar]
    #[arg(long)]
    method: Option<String>,
    /// Attack mode: targeted or untargeted [default: untargeted]
    #[arg(long)]
    mode: Option<String>,
    /// Targeted-class strategy: fixed:<class> or next [default: next]
    #[arg(long)]
    strategy: Option<String>,
    /// Perturbation norm(s), comma separated: l1,l2 [default: l2]
    #[arg(long, value_delimiter = ',')]
    norm: Vec<String>,
    /// Attack-goal weight c [default: 5]
    #[arg(long)]
    c: Option<Float>,
    /// Confidence margin kappa [default: 5]
    #[arg(long)]
    kappa: Option<Float>,
    /// Max optimization steps m [default: 100]
    #[arg(long)]
    steps: Option<usize>,
    /// Adam step size for the perturbation [default: 0.1]
    #[arg(long)]
    alpha: Option<Float>,
    /// Candidate selection: best (fewest modified chars) or final [default: best]
    #[arg(long)]
    selection: Option<String>,
    /// Sweep of c/kappa cells, e.g. "5/5,10/5,10/10"
    #[arg(long)]
    sweep: Option<String>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    workers: Option<usize>,
    /// Baseline cluster count [default: min(1000, non-special vocab / 2)]
    #[arg(long)]
    baseline_k: Option<usize>,
}

#[derive(clap::Args)]
struct TransferArgs {
    /// Blackbox checkpoint to evaluate
    #[arg(long)]
    blackbox: Option<PathBuf>,
    /// Adversarial records JSONL from an attack run
    #[arg(long)]
    adversarial: Option<PathBuf>,
    /// summary.json of the generating run (for the vocab check)
    /// [default: summary.json next to the records]
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Output directory for transfer.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExportHumanEvalArgs {
    /// Checkpoint (for the label names)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Clean test set JSONL
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Adversarial records JSONL from an untargeted attack run
    #[arg(long)]
    adversarial: Option<PathBuf>,
    /// Output directory for study.jsonl and key.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clean and adversarial items each [default: 50]
    #[arg(long)]
    n_each: Option<usize>,
}

#[derive(clap::Args)]
struct ExportVocabArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output text file
    #[arg(long)]
    out: Option<PathBuf>,
}

/// TOML mirror of the flags; every field optional, flags win.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    gen: Option<GenSection>,
    train: Option<TrainSection>,
    attack: Option<AttackSection>,
    transfer: Option<TransferSection>,
    export_human_eval: Option<ExportSection>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenSection {
    out: Option<PathBuf>,
    seed: Option<u64>,
    classes: Option<usize>,
    vocab_size: Option<usize>,
    per_class: Option<usize>,
    per_class_dev: Option<usize>,
    per_class_test: Option<usize>,
    keywords_per_class: Option<usize>,
    len_min: Option<usize>,
    len_max: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    d_c: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    max_len: Option<usize>,
    min_freq: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<Float>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AttackSection {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    method: Option<String>,
    mode: Option<String>,
    strategy: Option<String>,
    norm: Option<String>,
    c: Option<Float>,
    kappa: Option<Float>,
    steps: Option<usize>,
    alpha: Option<Float>,
    selection: Option<String>,
    sweep: Option<String>,
    workers: Option<usize>,
    baseline_k: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TransferSection {
    blackbox: Option<PathBuf>,
    adversarial: Option<PathBuf>,
    summary: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExportSection {
    checkpoint: Option<PathBuf>,
    clean: Option<PathBuf>,
    adversarial: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    n_each: Option<usize>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let raw =
                std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("advchar: {err}");
        let code = match err.category() {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numerical => 3,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Train(args) => commands::train(args),
        Command::Attack(args) => commands::attack(args),
        Command::Transfer(args) => commands::transfer(args),
        Command::ExportHumanEval(args) => commands::export_human_eval(args),
        Command::ExportVocab(args) => commands::export_vocab(args),
    }
}
