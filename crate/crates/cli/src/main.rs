//! `conslab`: probe masked LMs for paraphrase consistency, train the toy
//! model with the consistency objective, and analyse the results.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "conslab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a pattern resource and print its statistics.
    Validate(ValidateArgs),
    /// Score every (tuple, pattern) cloze and write a metric report.
    Probe(ProbeArgs),
    /// Continue training a toy checkpoint with the consistency objective.
    Train(TrainArgs),
    /// McNemar's test on tuple-level Consistent-Acc of two prediction dumps.
    Compare(CompareArgs),
    /// Cluster mask-position representations of one relation.
    Analyze(AnalyzeArgs),
    /// Write a seeded synthetic KB (resource, tuples, vocabulary).
    GenSynth(GenSynthArgs),
    /// Pretrain a toy MLM on the filled patterns of a KB.
    Pretrain(PretrainArgs),
    /// Run the toy-scale training-effect experiment end to end.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AggregateChoice {
    Macro,
    Micro,
    Both,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    resource: PathBuf,
    /// Also load and check a tuples file against the resource.
    #[arg(long)]
    tuples: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    resource: PathBuf,
    #[arg(long)]
    tuples: PathBuf,
    /// `majority`, `toy:<checkpoint>` or `bridge:<endpoint>`.
    #[arg(long)]
    scorer: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Aggregate printed to stdout; the report always holds both.
    #[arg(long, value_enum, default_value_t = AggregateChoice::Both)]
    aggregate: AggregateChoice,
    /// Report path.
    #[arg(long)]
    out: PathBuf,
    /// Prediction dump (JSON lines), one record per (tuple, pattern).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Print the query plan without scoring.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, env = "CONSLAB_BRIDGE", hide_env_values = true)]
    #[serde(skip)]
    bridge_override: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    resource: PathBuf,
    #[arg(long)]
    tuples: PathBuf,
    /// Must be a toy checkpoint: `toy:<path>`.
    #[arg(long)]
    scorer: String,
    /// Comma-separated relation ids to train on.
    #[arg(long, value_delimiter = ',', required = true)]
    train_relations: Vec<String>,
    /// Comma-separated relation ids for model selection.
    #[arg(long, value_delimiter = ',')]
    val_relations: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1")]
    lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_tuples: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_consistency_loss: bool,
    #[arg(long)]
    no_typed: bool,
    #[arg(long)]
    no_mlm: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    predictions_a: PathBuf,
    #[arg(long)]
    predictions_b: PathBuf,
    #[arg(long)]
    report_a: Option<PathBuf>,
    #[arg(long)]
    report_b: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    resource: PathBuf,
    #[arg(long)]
    tuples: PathBuf,
    #[arg(long)]
    scorer: String,
    #[arg(long)]
    relation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Output directory for `embeddings.tsv` and `vmeasure.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "CONSLAB_BRIDGE", hide_env_values = true)]
    #[serde(skip)]
    bridge_override: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    relations: usize,
    #[arg(long, default_value_t = 50)]
    entities: usize,
    #[arg(long, default_value_t = 4)]
    patterns: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    resource: PathBuf,
    #[arg(long)]
    tuples: PathBuf,
    /// One token per line; built from the resource and tuples if omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Probability that a non-base pattern of a fact is in the corpus.
    #[arg(long, default_value_t = 1.0)]
    exposure: f64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Probe(a) => commands::probe(a),
        Command::Train(a) => commands::train(a),
        Command::Compare(a) => commands::compare(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            commands::exit_code_for(&err)
        }
    }
}
