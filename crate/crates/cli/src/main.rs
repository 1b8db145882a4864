use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{RunConfig, TrainSplit};

/// Subject-conditional relation detection: data generation, splits, training,
/// prediction and evaluation.
#[derive(Debug, Parser)]
#[command(name = "reldet", version)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for extraction, prediction and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Comma-separated K values (the largest is the beam width for `predict`).
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Comma-separated IoU thresholds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub iou: Vec<f64>,
    /// Output location, overriding the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes, grounded records, captions and a test pool.
    GenSynthetic,
    /// Extract triplets from captions and emit ungrounded records.
    ExtractTriplets {
        /// Caption records; defaults to `<data_dir>/captions.jsonl`.
        #[arg(long)]
        captions: Option<PathBuf>,
    },
    /// Build Set A/B, base and text-augmented training splits and test splits.
    BuildSplits,
    /// Train a model on one of the training splits.
    Train {
        #[arg(long, value_enum)]
        split: Option<TrainSplit>,
    },
    /// Decode predictions for every record of a split.
    Predict {
        /// Split name under the splits directory, e.g. `test_b`.
        #[arg(long)]
        split: Option<String>,
        /// Use one beam search straight to `[SEP]` instead of two-step decoding.
        #[arg(long)]
        single_pass: bool,
        /// Checkpoint to decode with; defaults to the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions against the test splits.
    Evaluate {
        /// Prediction records; defaults to the configured predictions path.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Pretty-print a record file.
    Inspect {
        file: PathBuf,
    },
}

fn category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(r) = cause.downcast_ref::<reldet::Error>() {
            return r.category();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "parse";
        }
    }
    "error"
}

/// Joins the error chain on one line, skipping causes already spelled out by a parent.
fn message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).format_timestamp(None).init();
    let result = RunConfig::load(cli.config.as_deref()).and_then(|cfg| commands::run(&cli, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", category(&e), message(&e));
            ExitCode::from(1)
        }
    }
}
