use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Subcommand};
use rayon::prelude::*;
use sdtag::corpus::{Corpus, Paragraph, Split};
use sdtag::featcrf::{decode_featcrf, extract_features, train_featcrf, FeatCrfModel, FeatureVector};
use sdtag::fragments::{decode_blocks, encode_blocks, extract_mentions, BlockTag, CodeSet, FragmentCounts, FragmentScore};
use sdtag::metrics::micro_f1;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::inputs;
use crate::manifest::{sidecar, write_file, write_json, RunManifest};

pub const L2_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const DEFAULT_L2: f64 = 1.0;

#[derive(Debug, Subcommand)]
pub enum FragmentsCommand {
    /// Train the block-boundary CRF.
    Train(FragTrainArgs),
    /// Write predicted subfigure codes per clause as JSONL.
    Predict(FragPredictArgs),
    /// Score predictions against the corpus fragment annotations.
    Eval(FragEvalArgs),
}

/// Where the discourse-tag features come from.
#[derive(Debug, Args)]
#[command(group(ArgGroup::new("tags").args(["discourse_model", "gold_tags", "no_tags"])))]
pub struct TagSource {
    /// Tag clauses with this discourse checkpoint (needs --embeddings).
    #[arg(long, requires = "embeddings")]
    pub discourse_model: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Use the corpus gold discourse labels.
    #[arg(long)]
    pub gold_tags: bool,
    /// Drop discourse-tag features entirely.
    #[arg(long)]
    pub no_tags: bool,
}

impl TagSource {
    fn selected(&self) -> bool {
        self.discourse_model.is_some() || self.gold_tags || self.no_tags
    }

    fn describe(&self) -> String {
        match &self.discourse_model {
            Some(p) => format!("model:{}", p.display()),
            None if self.gold_tags => "gold".into(),
            None => "none".into(),
        }
    }

    /// Discourse tags per paragraph, or `None` for the no-tags ablation.
    fn tags(&self, corpus: &Corpus, manifest: &mut RunManifest) -> CliResult<Option<Vec<Vec<String>>>> {
        if !self.selected() {
            return Err(CliError::invalid("choose one of --discourse-model, --gold-tags, --no-tags"));
        }
        if let Some(path) = &self.discourse_model {
            let model = inputs::model(path, manifest)?;
            let store = inputs::store(self.embeddings.as_deref().expect("clap requires embeddings"), manifest)?;
            return Ok(Some(inputs::tag_all(&model, corpus, &store)?));
        }
        if self.gold_tags {
            return Ok(Some(inputs::gold_labels(corpus)?));
        }
        Ok(None)
    }
}

fn mentions(p: &Paragraph) -> Vec<CodeSet> {
    p.clauses
        .iter()
        .map(|c| if c.raw_text.is_empty() { extract_mentions(&c.tokens.join(" ")) } else { extract_mentions(&c.raw_text) })
        .collect()
}

struct Prepared {
    features: Vec<Vec<FeatureVector>>,
    mentions: Vec<Vec<CodeSet>>,
}

fn prepare(corpus: &Corpus, tags: Option<&[Vec<String>]>) -> CliResult<Prepared> {
    let mentions: Vec<Vec<CodeSet>> = corpus.paragraphs.iter().map(mentions).collect();
    let features: sdtag::Result<Vec<_>> = corpus
        .paragraphs
        .par_iter()
        .enumerate()
        .map(|(i, p)| extract_features(p, tags.map(|t| t[i].as_slice()), &mentions[i]))
        .collect();
    Ok(Prepared { features: features?, mentions })
}

fn referred(corpus: &Corpus) -> CliResult<Vec<&[CodeSet]>> {
    corpus
        .paragraphs
        .iter()
        .map(|p| {
            p.fragment
                .as_ref()
                .map(|f| f.referred.as_slice())
                .ok_or_else(|| CliError::invalid(format!("paragraph {} has no fragment annotation", p.id)))
        })
        .collect()
}

fn score(model: &FeatCrfModel, data: &Prepared, gold: &[&[CodeSet]]) -> CliResult<FragmentScore> {
    let mut counts = FragmentCounts::default();
    for ((f, m), g) in data.features.iter().zip(&data.mentions).zip(gold) {
        counts.add(&decode_blocks(&decode_featcrf(f, model), m)?, g)?;
    }
    Ok(counts.score())
}

fn subset(data: &Prepared, corpus: &Corpus, ids: &[&str]) -> (Prepared, Vec<usize>) {
    let idx: Vec<usize> = corpus.paragraphs.iter().enumerate().filter(|(_, p)| ids.contains(&p.id.as_str())).map(|(i, _)| i).collect();
    let pick = Prepared {
        features: idx.iter().map(|&i| data.features[i].clone()).collect(),
        mentions: idx.iter().map(|&i| data.mentions[i].clone()).collect(),
    };
    (pick, idx)
}

#[derive(Debug, Args)]
pub struct FragTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tags: TagSource,
    /// Fixed L2 strength; without it the grid 0.01, 0.1, 1, 10 is searched
    /// on a held-out part of the corpus by block-tag micro F1.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    pub dev_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct GridPoint {
    l2: f64,
    /// Micro F1 over B/I/O tags, the selection criterion.
    dev_tag_f1: f64,
    dev_fragment_f1: f64,
}

fn tag_f1(model: &FeatCrfModel, data: &Prepared, gold: &[&[CodeSet]]) -> CliResult<f64> {
    let mut pred = Vec::new();
    let mut want = Vec::new();
    for (f, g) in data.features.iter().zip(gold) {
        pred.extend(decode_featcrf(f, model).into_iter().map(BlockTag::as_str));
        want.extend(encode_blocks(g).into_iter().map(BlockTag::as_str));
    }
    Ok(micro_f1(&pred, &want)?)
}

fn training_pairs(data: &Prepared, gold: &[&[CodeSet]]) -> Vec<(Vec<FeatureVector>, Vec<BlockTag>)> {
    data.features.iter().zip(gold).map(|(f, g)| (f.clone(), encode_blocks(g))).collect()
}

pub fn cmd_train(args: &FragTrainArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("fragments train");
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let gold = referred(&corpus)?;
    let tags = args.tags.tags(&corpus, &mut manifest)?;
    let data = prepare(&corpus, tags.as_deref())?;
    let mut grid = Vec::new();
    let l2 = match args.l2 {
        Some(l2) => l2,
        None => {
            let (fit_part, dev_part) = corpus.split_off(args.dev_ratio, args.seed, Split::Dev);
            if dev_part.paragraphs.is_empty() {
                return Err(CliError::invalid("corpus too small for an L2 grid search; pass --l2"));
            }
            let fit_ids: Vec<&str> = fit_part.paragraphs.iter().map(|p| p.id.as_str()).collect();
            let dev_ids: Vec<&str> = dev_part.paragraphs.iter().map(|p| p.id.as_str()).collect();
            let (fit_data, fit_idx) = subset(&data, &corpus, &fit_ids);
            let (dev_data, dev_idx) = subset(&data, &corpus, &dev_ids);
            let fit_gold: Vec<&[CodeSet]> = fit_idx.iter().map(|&i| gold[i]).collect();
            let dev_gold: Vec<&[CodeSet]> = dev_idx.iter().map(|&i| gold[i]).collect();
            let pairs = training_pairs(&fit_data, &fit_gold);
            for l2 in L2_GRID {
                let (m, _) = train_featcrf(&pairs, l2)?;
                grid.push(GridPoint { l2, dev_tag_f1: tag_f1(&m, &dev_data, &dev_gold)?, dev_fragment_f1: score(&m, &dev_data, &dev_gold)?.f1 });
            }
            // ties go to the default, then to the weaker penalty
            let best = grid.iter().map(|g| g.dev_tag_f1).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<f64> = grid.iter().filter(|g| g.dev_tag_f1 == best).map(|g| g.l2).collect();
            if tied.contains(&DEFAULT_L2) { DEFAULT_L2 } else { tied[0] }
        }
    };
    let (model, report) = train_featcrf(&training_pairs(&data, &gold), l2)?;
    write_file(&args.out, model.to_text().as_bytes())?;
    manifest.output(&args.out)?;
    manifest.seed = Some(args.seed);
    manifest.config(&serde_json::json!({ "tags": args.tags.describe(), "l2": l2, "dev_ratio": args.dev_ratio, "grid": grid }))?;
    manifest.summary(&serde_json::json!({
        "iterations": report.iterations,
        "converged": report.converged,
        "grad_norm": report.grad_norm,
        "final_objective": report.objective.last(),
        "train": score(&model, &data, &gold)?,
    }))?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    println!("feature CRF trained with l2 {l2}: {} iterations, converged {}", report.iterations, report.converged);
    Ok(())
}

fn load_featcrf(path: &Path, manifest: &mut RunManifest) -> CliResult<FeatCrfModel> {
    Ok(FeatCrfModel::from_text(&inputs::text(path, manifest)?)?)
}

#[derive(Debug, Args)]
pub struct FragPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tags: TagSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PredictedClause<'a> {
    block: &'static str,
    codes: &'a CodeSet,
}

#[derive(Serialize)]
struct PredictedParagraph<'a> {
    id: &'a str,
    clauses: Vec<PredictedClause<'a>>,
}

pub fn cmd_predict(args: &FragPredictArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("fragments predict");
    let model = load_featcrf(&args.model, &mut manifest)?;
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let tags = args.tags.tags(&corpus, &mut manifest)?;
    let data = prepare(&corpus, tags.as_deref())?;
    let mut out = String::new();
    for ((p, f), m) in corpus.paragraphs.iter().zip(&data.features).zip(&data.mentions) {
        let blocks = decode_featcrf(f, &model);
        let codes = decode_blocks(&blocks, m)?;
        let rec = PredictedParagraph {
            id: &p.id,
            clauses: blocks.iter().zip(&codes).map(|(b, codes)| PredictedClause { block: b.as_str(), codes }).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| CliError::Internal(e.to_string()))?);
        out.push('\n');
    }
    write_file(&args.out, out.as_bytes())?;
    manifest.output(&args.out)?;
    manifest.config(&serde_json::json!({ "tags": args.tags.describe() }))?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    println!("wrote predictions for {} paragraphs", corpus.paragraphs.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct FragEvalArgs {
    /// Feature CRF to score; optional with --gold-bio.
    #[arg(long, required_unless_present = "gold_bio")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub tags: TagSource,
    /// Also decode the gold block tags: the ceiling set by the decoder alone.
    #[arg(long)]
    pub gold_bio: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct FragEvalReport {
    paragraphs: usize,
    clauses: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tags: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<FragmentScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_bio: Option<FragmentScore>,
}

pub fn cmd_eval(args: &FragEvalArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("fragments eval");
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let gold = referred(&corpus)?;
    let model_score = match &args.model {
        Some(path) => {
            let model = load_featcrf(path, &mut manifest)?;
            let t = args.tags.tags(&corpus, &mut manifest)?;
            Some(score(&model, &prepare(&corpus, t.as_deref())?, &gold)?)
        }
        None => None,
    };
    let oracle = if args.gold_bio {
        let mut counts = FragmentCounts::default();
        for (p, g) in corpus.paragraphs.iter().zip(&gold) {
            counts.add(&decode_blocks(&encode_blocks(g), &mentions(p))?, g)?;
        }
        Some(counts.score())
    } else {
        None
    };
    let report = FragEvalReport {
        paragraphs: corpus.paragraphs.len(),
        clauses: corpus.clause_count(),
        tags: args.model.as_ref().map(|_| args.tags.describe()),
        model: model_score,
        gold_bio: oracle,
    };
    write_json(&args.out, &report)?;
    manifest.output(&args.out)?;
    manifest.config(&serde_json::json!({ "gold_bio": args.gold_bio, "tags": report.tags }))?;
    manifest.summary(&report)?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    if let Some(s) = &report.model {
        println!("fragment F1 {:.4} (P {:.4}, R {:.4})", s.f1, s.precision, s.recall);
    }
    if let Some(s) = &report.gold_bio {
        println!("gold-BIO fragment F1 {:.4}", s.f1);
    }
    Ok(())
}
