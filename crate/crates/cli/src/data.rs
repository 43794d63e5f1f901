use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use sdtag::corpus::{parse_coda, parse_jsonl, parse_rct, parse_scidt, write_jsonl, Corpus, LabelSet, Split};
use sdtag::embeddings::synthetic_store;
use sdtag::synthetic::{fragment_corpus, keyword_corpus};

use crate::error::{CliError, CliResult};
use crate::inputs;
use crate::manifest::{sidecar, write_file, RunManifest};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Rct,
    Scidt,
    Coda,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long, value_enum)]
    pub format: Format,
    #[arg(long)]
    pub input: PathBuf,
    /// Canonical JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_import(args: &ImportArgs) -> CliResult<()> {
    let mut manifest = RunManifest::start("import");
    // read once through the manifest so a missing file exits as I/O
    inputs::text(&args.input, &mut manifest)?;
    let corpus = match args.format {
        Format::Rct => parse_rct(&args.input)?,
        Format::Scidt => parse_scidt(&args.input)?,
        Format::Coda => parse_coda(&args.input)?,
        Format::Jsonl => parse_jsonl(&args.input, None)?,
    };
    write_file(&args.out, write_jsonl(&corpus).as_bytes())?;
    manifest.output(&args.out)?;
    manifest.config(&serde_json::json!({ "format": format!("{:?}", args.format).to_lowercase() }))?;
    manifest.summary(&serde_json::json!({ "label_set": corpus.label_set.name(), "paragraphs": corpus.paragraphs.len(), "clauses": corpus.clause_count() }))?;
    manifest.finish(&sidecar(&args.out, ".manifest.json"))?;
    println!("imported {} paragraphs ({} clauses) into {}", corpus.paragraphs.len(), corpus.clause_count(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Fraction of paragraphs moved to the held-out file.
    #[arg(long, default_value_t = 0.1)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out split name written into the header.
    #[arg(long, value_enum, default_value_t = HeldOut::Dev)]
    pub held_out: HeldOut,
    /// Output directory for `train.jsonl` and `dev.jsonl`/`test.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeldOut {
    Dev,
    Test,
}

pub fn cmd_split(args: &SplitArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.ratio) {
        return Err(CliError::invalid(format!("ratio {} outside [0, 1]", args.ratio)));
    }
    let mut manifest = RunManifest::start("split");
    let corpus = inputs::corpus(&args.corpus, &mut manifest)?;
    let split = match args.held_out {
        HeldOut::Dev => Split::Dev,
        HeldOut::Test => Split::Test,
    };
    let (train, held) = corpus.split_off(args.ratio, args.seed, split);
    let train_path = args.out.join("train.jsonl");
    let held_path = args.out.join(format!("{split}.jsonl"));
    write_file(&train_path, write_jsonl(&train).as_bytes())?;
    write_file(&held_path, write_jsonl(&held).as_bytes())?;
    manifest.output(&train_path)?;
    manifest.output(&held_path)?;
    manifest.seed = Some(args.seed);
    manifest.config(&serde_json::json!({ "ratio": args.ratio, "held_out": split.to_string() }))?;
    manifest.summary(&serde_json::json!({ "train": train.paragraphs.len(), "held_out": held.paragraphs.len() }))?;
    manifest.finish(&args.out.join("manifest.json"))?;
    println!("{} train / {} {split} paragraphs", train.paragraphs.len(), held.paragraphs.len());
    Ok(())
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Corpus whose clauses each carry a label-specific cue word.
    Keywords(KeywordArgs),
    /// Fragment-annotated corpus with figure mentions and planted violations.
    Fragments(FragmentArgs),
    /// Hash-based embeddings for an existing corpus.
    Embeddings(EmbeddingArgs),
}

#[derive(Debug, Args)]
pub struct KeywordArgs {
    #[arg(long, default_value = "scidt")]
    pub label_set: String,
    #[arg(long, default_value_t = 20)]
    pub paragraphs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding dimension of the accompanying store.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Output directory for `corpus.jsonl` and `embeddings.sdte`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FragmentArgs {
    #[arg(long, default_value_t = 50)]
    pub paragraphs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub violation_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// One or more canonical JSONL corpora; all go into one store.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn write_fixture(corpus: &Corpus, dim: usize, seed: u64, out: &std::path::Path, mut manifest: RunManifest) -> CliResult<()> {
    let corpus_path = out.join("corpus.jsonl");
    let store_path = out.join("embeddings.sdte");
    write_file(&corpus_path, write_jsonl(corpus).as_bytes())?;
    write_file(&store_path, &synthetic_store(&corpus.paragraphs, dim, seed)?.to_bytes())?;
    manifest.output(&corpus_path)?;
    manifest.output(&store_path)?;
    manifest.seed = Some(seed);
    manifest.finish(&out.join("manifest.json"))?;
    println!("wrote {} paragraphs and {dim}-dim embeddings to {}", corpus.paragraphs.len(), out.display());
    Ok(())
}

pub fn cmd_synth(cmd: &SynthCommand) -> CliResult<()> {
    match cmd {
        SynthCommand::Keywords(a) => {
            let ls = LabelSet::builtin(&a.label_set).ok_or_else(|| CliError::invalid(format!("unknown label set `{}`", a.label_set)))?;
            let mut manifest = RunManifest::start("synth keywords");
            manifest.config(&serde_json::json!({ "label_set": a.label_set, "paragraphs": a.paragraphs, "dim": a.dim }))?;
            write_fixture(&keyword_corpus(&ls, a.paragraphs, a.seed), a.dim, a.seed, &a.out, manifest)
        }
        SynthCommand::Fragments(a) => {
            if !(0.0..=1.0).contains(&a.violation_rate) {
                return Err(CliError::invalid(format!("violation rate {} outside [0, 1]", a.violation_rate)));
            }
            let fx = fragment_corpus(a.paragraphs, a.violation_rate, a.seed);
            let mut manifest = RunManifest::start("synth fragments");
            manifest.config(&serde_json::json!({ "paragraphs": a.paragraphs, "violation_rate": a.violation_rate, "dim": a.dim }))?;
            manifest.summary(&serde_json::json!({ "blocks": fx.blocks, "violating": fx.violating, "gold_bio_ceiling": fx.expected.score() }))?;
            write_fixture(&fx.corpus, a.dim, a.seed, &a.out, manifest)
        }
        SynthCommand::Embeddings(a) => {
            let mut manifest = RunManifest::start("synth embeddings");
            let mut paragraphs = Vec::new();
            for path in &a.corpus {
                paragraphs.extend(inputs::corpus(path, &mut manifest)?.paragraphs);
            }
            write_file(&a.out, &synthetic_store(&paragraphs, a.dim, a.seed)?.to_bytes())?;
            manifest.output(&a.out)?;
            manifest.seed = Some(a.seed);
            manifest.config(&serde_json::json!({ "dim": a.dim }))?;
            manifest.finish(&sidecar(&a.out, ".manifest.json"))?;
            println!("wrote {}-dim embeddings for {} paragraphs to {}", a.dim, paragraphs.len(), a.out.display());
            Ok(())
        }
    }
}
