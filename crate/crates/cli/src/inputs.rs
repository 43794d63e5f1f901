use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sdtag::corpus::{parse_jsonl, Corpus};
use sdtag::embeddings::EmbeddingStore;
use sdtag::tagger::{checkpoint, TaggerModel};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

/// Every path is checked for existence first so that a missing file is
/// reported as I/O rather than as a parse failure.
fn exists(path: &Path) -> CliResult<()> {
    fs::metadata(path).map(|_| ()).map_err(|e| CliError::io(path, e))
}

pub fn corpus(path: &Path, manifest: &mut RunManifest) -> CliResult<Corpus> {
    exists(path)?;
    manifest.input(path)?;
    Ok(parse_jsonl(path, None)?)
}

pub fn store(path: &Path, manifest: &mut RunManifest) -> CliResult<EmbeddingStore> {
    exists(path)?;
    manifest.input(path)?;
    Ok(EmbeddingStore::read(path)?)
}

pub fn model(path: &Path, manifest: &mut RunManifest) -> CliResult<TaggerModel> {
    exists(path)?;
    manifest.input(path)?;
    Ok(checkpoint::load(path)?)
}

pub fn text(path: &Path, manifest: &mut RunManifest) -> CliResult<String> {
    exists(path)?;
    manifest.input(path)?;
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn check_dim(model: &TaggerModel, store: &EmbeddingStore) -> CliResult<()> {
    if model.config.d != store.dim() {
        return Err(CliError::invalid(format!("model expects {}-dim embeddings, file has {}", model.config.d, store.dim())));
    }
    Ok(())
}

/// Predicted labels per paragraph, tagged in parallel; order follows the corpus.
pub fn tag_all(model: &TaggerModel, corpus: &Corpus, store: &EmbeddingStore) -> CliResult<Vec<Vec<String>>> {
    check_dim(model, store)?;
    let tagged: sdtag::Result<Vec<_>> = corpus.paragraphs.par_iter().map(|p| model.tag(p, store)).collect();
    Ok(tagged?)
}

pub fn gold_labels(corpus: &Corpus) -> CliResult<Vec<Vec<String>>> {
    corpus
        .paragraphs
        .iter()
        .map(|p| p.gold_labels().ok_or_else(|| CliError::invalid(format!("paragraph {} has unlabeled clauses", p.id))))
        .collect()
}
