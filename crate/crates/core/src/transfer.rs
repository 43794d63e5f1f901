//! Cross-dataset transfer: majority-vote label maps for zero-shot tagging and
//! head-swap fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::metrics::micro_f1;
use crate::tagger::{fit, TaggerConfig, TaggerModel, TrainReport};

pub const TIE_RULE: &str = "most frequent target label overall, then lexicographic";

/// Source→target label mapping with the counts it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub source_label_set: String,
    pub target_label_set: String,
    pub mapping: BTreeMap<String, String>,
    /// `contingency[predicted source label][gold target label]`.
    pub contingency: BTreeMap<String, BTreeMap<String, u64>>,
    /// Source labels never predicted; mapped to the target none label.
    pub degenerate: Vec<String>,
    pub tie_rule: String,
}

impl LabelMap {
    pub fn get(&self, source: &str) -> Option<&str> {
        self.mapping.get(source).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn gold(corpus: &Corpus) -> Result<Vec<Vec<String>>> {
    corpus
        .paragraphs
        .iter()
        .map(|p| p.gold_labels().ok_or_else(|| Error::LabelSet(format!("paragraph {} has unlabeled clauses", p.id))))
        .collect()
}

fn majority(row: &BTreeMap<String, u64>, frequency: &BTreeMap<&str, u64>) -> Option<String> {
    row.iter()
        .filter(|(_, &c)| c > 0)
        .max_by(|(la, ca), (lb, cb)| {
            ca.cmp(cb)
                .then_with(|| frequency.get(la.as_str()).cmp(&frequency.get(lb.as_str())))
                .then_with(|| lb.cmp(la))
        })
        .map(|(l, _)| l.clone())
}

/// Tags `target_train` with the source model and maps each source label to
/// the target label it most often co-occurs with.
pub fn learn_label_map(source: &TaggerModel, target_train: &Corpus, store: &EmbeddingStore) -> Result<LabelMap> {
    let gold = gold(target_train)?;
    let target = &target_train.label_set;
    let mut contingency: BTreeMap<String, BTreeMap<String, u64>> = source.label_set.labels().iter().map(|l| (l.clone(), BTreeMap::new())).collect();
    let mut frequency: BTreeMap<&str, u64> = BTreeMap::new();
    for (p, g) in target_train.paragraphs.iter().zip(&gold) {
        let pred = source.tag(p, store)?;
        for (s, t) in pred.into_iter().zip(g) {
            *contingency.entry(s).or_default().entry(t.clone()).or_default() += 1;
            *frequency.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut mapping = BTreeMap::new();
    let mut degenerate = Vec::new();
    for (s, row) in &contingency {
        let image = match majority(row, &frequency) {
            Some(l) => l,
            None => {
                degenerate.push(s.clone());
                target.none_label().to_string()
            }
        };
        mapping.insert(s.clone(), image);
    }
    Ok(LabelMap {
        source_label_set: source.label_set.name().to_string(),
        target_label_set: target.name().to_string(),
        mapping,
        contingency,
        degenerate,
        tie_rule: TIE_RULE.to_string(),
    })
}

/// Predicted target labels for every clause of `corpus`, paragraph by paragraph.
pub fn map_predictions(source: &TaggerModel, map: &LabelMap, corpus: &Corpus, store: &EmbeddingStore) -> Result<Vec<Vec<String>>> {
    for l in source.label_set.labels() {
        let image = map.get(l).ok_or_else(|| Error::LabelSet(format!("label map has no entry for source label {l}")))?;
        corpus.label_set.require(image)?;
    }
    corpus
        .paragraphs
        .iter()
        .map(|p| Ok(source.tag(p, store)?.iter().map(|l| map.mapping[l].clone()).collect()))
        .collect()
}

/// Tags, maps and scores `target_test` with clause-level micro F1.
pub fn zero_shot_eval(source: &TaggerModel, map: &LabelMap, target_test: &Corpus, store: &EmbeddingStore) -> Result<f64> {
    let gold: Vec<String> = gold(target_test)?.into_iter().flatten().collect();
    let pred: Vec<String> = map_predictions(source, map, target_test, store)?.into_iter().flatten().collect();
    micro_f1(&pred, &gold)
}

/// Replaces the output head for the target label set and trains on `target`
/// with a fresh optimiser.
pub fn fine_tune(pretrained: &TaggerModel, target: &Corpus, store: &EmbeddingStore, config: &TaggerConfig) -> Result<(TaggerModel, TrainReport)> {
    let model = pretrained.swap_head(target.label_set.clone(), config.seed);
    fit(model, target, store, config)
}
