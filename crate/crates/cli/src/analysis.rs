use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use sdtag::encoder::{report_html, report_tsv};
use sdtag::transfer::{learn_label_map, zero_shot_eval};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs;
use crate::manifest::{write_file, write_json, RunManifest};

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    /// Source-task checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled target corpus the map is learned from.
    #[arg(long)]
    pub target_train: PathBuf,
    #[arg(long)]
    pub target_test: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output directory for `label_map.json`, `report.json` and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ZeroshotReport {
    source_label_set: String,
    target_label_set: String,
    micro_f1: f64,
    /// Source labels the model never predicted on the target training set.
    degenerate: Vec<String>,
    mapping: std::collections::BTreeMap<String, String>,
}

pub fn cmd_zeroshot(args: &ZeroshotArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("zeroshot");
    let model = inputs::model(&args.model, &mut manifest)?;
    let train = inputs::corpus(&args.target_train, &mut manifest)?;
    let test = inputs::corpus(&args.target_test, &mut manifest)?;
    let store = inputs::store(&args.embeddings, &mut manifest)?;
    if train.label_set != test.label_set {
        return Err(CliError::invalid(format!("target train uses `{}`, target test `{}`", train.label_set.name(), test.label_set.name())));
    }
    inputs::check_dim(&model, &store)?;
    let map = learn_label_map(&model, &train, &store)?;
    let f1 = zero_shot_eval(&model, &map, &test, &store)?;
    let map_path = args.out.join("label_map.json");
    write_file(&map_path, format!("{}\n", map.to_json()?).as_bytes())?;
    let report = ZeroshotReport {
        source_label_set: map.source_label_set.clone(),
        target_label_set: map.target_label_set.clone(),
        micro_f1: f1,
        degenerate: map.degenerate.clone(),
        mapping: map.mapping.clone(),
    };
    let report_path = args.out.join("report.json");
    write_json(&report_path, &report)?;
    manifest.output(&map_path)?;
    manifest.output(&report_path)?;
    manifest.config(&serde_json::json!({ "tie_rule": map.tie_rule }))?;
    manifest.summary(&serde_json::json!({ "micro_f1": f1, "degenerate": map.degenerate }))?;
    manifest.finish(&args.out.join("manifest.json"))?;
    for (s, t) in &map.mapping {
        let flag = if map.degenerate.contains(s) { "  (never predicted)" } else { "" };
        println!("{s} -> {t}{flag}");
    }
    println!("zero-shot micro F1 {f1:.4}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output directory: one `.tsv` and one `.html` per paragraph.
    #[arg(long)]
    pub out: PathBuf,
}

/// `{index}_{id}` with anything outside `[A-Za-z0-9._-]` replaced, so ids
/// cannot escape the directory or collide after sanitising.
fn file_stem(index: usize, id: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect();
    format!("{index:05}_{safe}")
}

pub fn cmd_attention(args: &AttentionArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("attention");
    let model = inputs::model(&args.model, &mut manifest)?;
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let store = inputs::store(&args.embeddings, &mut manifest)?;
    let predicted = inputs::tag_all(&model, &corpus, &store)?;
    let reports: sdtag::Result<Vec<(String, String)>> = corpus
        .paragraphs
        .par_iter()
        .zip(&predicted)
        .map(|(p, labels)| {
            let rows = model.attention_report(p, &store)?;
            Ok((report_tsv(&rows), report_html(&rows, Some(labels))))
        })
        .collect();
    let mut index = String::from("id\ttsv\thtml\n");
    for (i, (p, (tsv, html))) in corpus.paragraphs.iter().zip(reports?).enumerate() {
        let stem = file_stem(i, &p.id);
        let (tsv_path, html_path) = (args.out.join(format!("{stem}.tsv")), args.out.join(format!("{stem}.html")));
        write_file(&tsv_path, tsv.as_bytes())?;
        write_file(&html_path, html.as_bytes())?;
        manifest.output(&tsv_path)?;
        manifest.output(&html_path)?;
        index.push_str(&format!("{}\t{stem}.tsv\t{stem}.html\n", p.id));
    }
    let index_path = args.out.join("index.tsv");
    write_file(&index_path, index.as_bytes())?;
    manifest.output(&index_path)?;
    manifest.summary(&serde_json::json!({ "paragraphs": corpus.paragraphs.len() }))?;
    manifest.finish(&args.out.join("manifest.json"))?;
    println!("wrote attention reports for {} paragraphs to {}", corpus.paragraphs.len(), args.out.display());
    Ok(())
}
