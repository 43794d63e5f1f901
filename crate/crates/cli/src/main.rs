//! `sdt`: train and evaluate discourse taggers, detect evidence fragments,
//! and run transfer experiments from the command line.
//!
//! Exit status: 0 success, 2 I/O failure, 3 invalid input, 4 internal error.
//! `SDT_THREADS` caps the worker threads used for per-paragraph work.

mod analysis;
mod data;
mod error;
mod fragments;
mod inputs;
mod manifest;
mod tagging;

use std::panic;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sdt", version, about = "Scientific discourse tagging and evidence fragment detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a tagger, or fine-tune one with --pretrained.
    Train(tagging::TrainArgs),
    /// Score a tagger on a labelled corpus.
    Eval(tagging::EvalArgs),
    /// Evidence fragment detection with the feature CRF.
    #[command(subcommand)]
    Fragments(fragments::FragmentsCommand),
    /// Learn a majority-vote label map and score zero-shot transfer.
    Zeroshot(analysis::ZeroshotArgs),
    /// Per-token attention weights as TSV and HTML.
    Attention(analysis::AttentionArgs),
    /// Convert a dataset file to canonical JSONL.
    Import(data::ImportArgs),
    /// Split a corpus into train and held-out files.
    Split(data::SplitArgs),
    /// Generate synthetic corpora and embeddings.
    #[command(subcommand)]
    Synth(data::SynthCommand),
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("SDT_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::invalid(format!("SDT_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Internal(e.to_string()))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => tagging::cmd_train(a),
        Command::Eval(a) => tagging::cmd_eval(a),
        Command::Fragments(fragments::FragmentsCommand::Train(a)) => fragments::cmd_train(a),
        Command::Fragments(fragments::FragmentsCommand::Predict(a)) => fragments::cmd_predict(a),
        Command::Fragments(fragments::FragmentsCommand::Eval(a)) => fragments::cmd_eval(a),
        Command::Zeroshot(a) => analysis::cmd_zeroshot(a),
        Command::Attention(a) => analysis::cmd_attention(a),
        Command::Import(a) => data::cmd_import(a),
        Command::Split(a) => data::cmd_split(a),
        Command::Synth(c) => data::cmd_synth(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let result = panic::catch_unwind(|| run(&cli)).unwrap_or_else(|p| {
        let message = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
        Err(CliError::Internal(message.unwrap_or_else(|| "panic".into())))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sdt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
