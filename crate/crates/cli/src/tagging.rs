use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use sdtag::corpus::{Corpus, LabelSet};
use sdtag::metrics::{binary_f1, confusion, mcnemar, micro_f1, micro_prf_excluding, ConfusionMatrix, McNemar, Prf};
use sdtag::tagger::{checkpoint, train, TaggerConfig, TrainReport};
use sdtag::transfer::fine_tune;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs;
use crate::manifest::{sidecar, write_file, write_json, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Discourse,
    Claim,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Canonical JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Embedding file (SDTE).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSON tagger config; omitted fields take the full-size defaults. Without
    /// a config file the defaults are used with `d` taken from the embeddings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the manifest, loss log and report are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to fine-tune from (the output head is replaced).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

/// A claim corpus has one positive label besides none.
fn check_task(task: Task, ls: &LabelSet) -> CliResult<()> {
    let binary = ls.len() == 2;
    match (task, binary) {
        (Task::Claim, false) => Err(CliError::invalid(format!("claim task needs a two-label set, `{}` has {}", ls.name(), ls.len()))),
        (Task::Discourse, true) => Err(CliError::invalid(format!("label set `{}` is binary; use --task claim", ls.name()))),
        _ => Ok(()),
    }
}

pub fn loss_log(report: &TrainReport) -> String {
    let mut out = String::from("epoch\ttrain_loss\tmonitor_loss\timproved\n");
    for e in &report.epochs {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.epoch, e.train_loss, e.monitor_loss, e.improved);
    }
    out
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("train");
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    check_task(args.task, &corpus.label_set)?;
    let store = inputs::store(&args.embeddings, &mut manifest)?;
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&inputs::text(path, &mut manifest)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?,
        None => TaggerConfig { d: store.dim(), ..TaggerConfig::default() },
    };
    config.seed = args.seed;
    let (model, report) = match &args.pretrained {
        Some(path) => {
            let pretrained = inputs::model(path, &mut manifest)?;
            inputs::check_dim(&pretrained, &store)?;
            fine_tune(&pretrained, &corpus, &store, &config)?
        }
        None => {
            if config.d != store.dim() {
                return Err(CliError::invalid(format!("config d = {} but embeddings are {}-dim", config.d, store.dim())));
            }
            train(&corpus, &store, &config)?
        }
    };
    write_file(&args.out, &checkpoint::to_bytes(&model)?)?;
    let log = sidecar(&args.out, ".losses.tsv");
    write_file(&log, loss_log(&report).as_bytes())?;
    let report_path = sidecar(&args.out, ".report.json");
    write_json(&report_path, &report)?;
    for p in [&args.out, &log, &report_path] {
        manifest.output(p)?;
    }
    manifest.seed = Some(args.seed);
    manifest.config(&serde_json::json!({ "task": args.task, "tagger": config, "pretrained": args.pretrained }))?;
    manifest.summary(&serde_json::json!({
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "stopped_early": report.stopped_early,
        "best_monitor_loss": report.epochs.get(report.best_epoch.saturating_sub(1)).map(|e| e.monitor_loss),
    }))?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    println!("trained {} epochs (best {}), checkpoint {}", report.epochs.len(), report.best_epoch, args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Also report micro P/R/F1 with the none label removed.
    #[arg(long)]
    pub exclude_none: bool,
    /// Second checkpoint for a paired McNemar test.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Use the exact binomial test when there are few discordant pairs.
    #[arg(long)]
    pub exact: bool,
    /// JSON report path; the manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub model: PathBuf,
    pub micro_f1: f64,
    pub mcnemar: McNemar,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub label_set: String,
    pub paragraphs: usize,
    pub clauses: usize,
    pub micro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluding_none: Option<Prf>,
    /// F1 of the positive label, for two-label sets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary_f1: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub confusion_row_normalized: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<Comparison>,
}

fn same_labels(corpus: &Corpus, ls: &LabelSet, what: &str) -> CliResult<()> {
    if &corpus.label_set != ls {
        return Err(CliError::invalid(format!("{what} label set `{}` differs from corpus label set `{}`", ls.name(), corpus.label_set.name())));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("eval");
    let model = inputs::model(&args.model, &mut manifest)?;
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let store = inputs::store(&args.embeddings, &mut manifest)?;
    same_labels(&corpus, &model.label_set, "model")?;
    let gold: Vec<String> = inputs::gold_labels(&corpus)?.into_iter().flatten().collect();
    let pred: Vec<String> = inputs::tag_all(&model, &corpus, &store)?.into_iter().flatten().collect();
    let ls = &corpus.label_set;
    let none = ls.none_label();
    let binary = if ls.len() == 2 {
        let positive = |l: &String| l != none;
        Some(binary_f1(&pred.iter().map(positive).collect::<Vec<_>>(), &gold.iter().map(positive).collect::<Vec<_>>())?)
    } else {
        None
    };
    let matrix = confusion(&pred, &gold, ls)?;
    let compare = match &args.compare {
        Some(path) => {
            let other = inputs::model(path, &mut manifest)?;
            same_labels(&corpus, &other.label_set, "compared model")?;
            let pred_b: Vec<String> = inputs::tag_all(&other, &corpus, &store)?.into_iter().flatten().collect();
            Some(Comparison { model: path.clone(), micro_f1: micro_f1(&pred_b, &gold)?, mcnemar: mcnemar(&pred, &pred_b, &gold, args.exact)? })
        }
        None => None,
    };
    let report = EvalReport {
        label_set: ls.name().to_string(),
        paragraphs: corpus.paragraphs.len(),
        clauses: gold.len(),
        micro_f1: micro_f1(&pred, &gold)?,
        excluding_none: if args.exclude_none { Some(micro_prf_excluding(&pred, &gold, none)?) } else { None },
        binary_f1: binary,
        confusion_row_normalized: matrix.row_normalized(),
        confusion: matrix,
        compare,
    };
    write_json(&args.out, &report)?;
    manifest.output(&args.out)?;
    manifest.config(&serde_json::json!({ "exclude_none": args.exclude_none, "exact": args.exact }))?;
    manifest.summary(&serde_json::json!({ "micro_f1": report.micro_f1, "binary_f1": report.binary_f1 }))?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    print!("micro F1 {:.4}", report.micro_f1);
    if let Some(f) = report.binary_f1 {
        print!(", binary F1 {f:.4}");
    }
    if let Some(c) = &report.compare {
        print!(", McNemar p {:.4} (b {}, c {})", c.mcnemar.p_value, c.mcnemar.b, c.mcnemar.c);
    }
    println!();
    print!("{}", report.confusion.to_tsv());
    Ok(())
}
