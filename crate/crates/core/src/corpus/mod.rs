//! Data model shared by every pipeline stage: label sets, clauses, paragraphs
//! and corpora, plus the dataset importers and the BIO label codec.

mod bio;
mod formats;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fragments::FragmentAnnotation;

pub use bio::{decode_bio, encode_bio, BioTag};
pub use formats::{
    parse_coda, parse_coda_str, parse_jsonl, parse_jsonl_str, parse_rct, parse_rct_str,
    parse_scidt, parse_scidt_str, write_coda, write_jsonl, write_rct, write_scidt,
};

/// Synthetic none label appended to label sets whose datasets have no
/// "other" class, so the BIO codec stays total.
pub const SYNTHETIC_NONE: &str = "O_NONE";

/// A named tag vocabulary with one designated none/other label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSet", into = "RawLabelSet")]
pub struct LabelSet {
    name: String,
    labels: Vec<String>,
    none_label: String,
    none_index: usize,
}

#[derive(Serialize, Deserialize)]
struct RawLabelSet {
    name: String,
    labels: Vec<String>,
    none_label: String,
}

impl TryFrom<RawLabelSet> for LabelSet {
    type Error = Error;

    fn try_from(raw: RawLabelSet) -> Result<Self> {
        LabelSet::new(raw.name, raw.labels, raw.none_label)
    }
}

impl From<LabelSet> for RawLabelSet {
    fn from(ls: LabelSet) -> Self {
        RawLabelSet {
            name: ls.name,
            labels: ls.labels,
            none_label: ls.none_label,
        }
    }
}

impl LabelSet {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
        none_label: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let none_label = none_label.into();
        if labels.is_empty() {
            return Err(Error::LabelSet(format!("`{name}` has no labels")));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::LabelSet(format!("`{name}` contains an empty label")));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::LabelSet(format!("`{name}` repeats label `{l}`")));
            }
        }
        let none_index = labels
            .iter()
            .position(|l| *l == none_label)
            .ok_or_else(|| {
                Error::LabelSet(format!("none label `{none_label}` not in `{name}`"))
            })?;
        Ok(LabelSet {
            name,
            labels,
            none_label,
            none_index,
        })
    }

    /// The eight-label epistemic taxonomy used by the clause-level dataset.
    pub fn scidt() -> Self {
        Self::new(
            "scidt",
            [
                "goal",
                "fact",
                "result",
                "hypothesis",
                "method",
                "problem",
                "implication",
                "none",
            ],
            "none",
        )
        .expect("static label set")
    }

    /// Section-role labels of the RCT abstract dataset, with a synthetic none.
    pub fn rct() -> Self {
        Self::new(
            "rct",
            [
                "background",
                "objective",
                "methods",
                "results",
                "conclusions",
                SYNTHETIC_NONE,
            ],
            SYNTHETIC_NONE,
        )
        .expect("static label set")
    }

    /// Research-aspect labels of the CORD-19 abstract fragment dataset.
    pub fn coda() -> Self {
        Self::new(
            "coda",
            [
                "background",
                "purpose",
                "method",
                "finding/contribution",
                "other",
            ],
            "other",
        )
        .expect("static label set")
    }

    /// Binary claim/non-claim labels.
    pub fn claim() -> Self {
        Self::new("claim", ["claim", "none"], "none").expect("static label set")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "scidt" => Some(Self::scidt()),
            "rct" => Some(Self::rct()),
            "coda" => Some(Self::coda()),
            "claim" => Some(Self::claim()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn none_label(&self) -> &str {
        &self.none_label
    }

    pub fn none_index(&self) -> usize {
        self.none_index
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub(crate) fn require(&self, label: &str) -> Result<usize> {
        self.index_of(label).ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
            label_set: self.name.clone(),
        })
    }

    /// Number of BIO tags: a B/I pair per non-none label plus `O`.
    pub fn bio_size(&self) -> usize {
        2 * (self.labels.len() - 1) + 1
    }

    /// Dense index of a BIO tag. Pairs follow label order, `O` comes last.
    pub fn bio_index(&self, tag: BioTag) -> usize {
        match tag {
            BioTag::Outside => self.bio_size() - 1,
            BioTag::Begin(l) => 2 * self.rank(l),
            BioTag::Inside(l) => 2 * self.rank(l) + 1,
        }
    }

    pub fn bio_tag(&self, index: usize) -> BioTag {
        assert!(index < self.bio_size(), "BIO index {index} out of range");
        if index == self.bio_size() - 1 {
            return BioTag::Outside;
        }
        let mut label = index / 2;
        if label >= self.none_index {
            label += 1;
        }
        if index.is_multiple_of(2) {
            BioTag::Begin(label)
        } else {
            BioTag::Inside(label)
        }
    }

    pub fn bio_name(&self, tag: BioTag) -> String {
        match tag {
            BioTag::Outside => "O".to_string(),
            BioTag::Begin(l) => format!("B_{}", self.labels[l]),
            BioTag::Inside(l) => format!("I_{}", self.labels[l]),
        }
    }

    pub fn parse_bio_name(&self, name: &str) -> Result<BioTag> {
        let unknown = || Error::UnknownLabel {
            label: name.to_string(),
            label_set: self.name.clone(),
        };
        if name == "O" {
            return Ok(BioTag::Outside);
        }
        let (prefix, label) = name.split_at_checked(2).ok_or_else(unknown)?;
        let idx = self.index_of(label).filter(|&i| i != self.none_index);
        match (prefix, idx) {
            ("B_", Some(i)) => Ok(BioTag::Begin(i)),
            ("I_", Some(i)) => Ok(BioTag::Inside(i)),
            _ => Err(unknown()),
        }
    }

    // position of a non-none label among the non-none labels
    fn rank(&self, label: usize) -> usize {
        debug_assert!(label != self.none_index);
        if label > self.none_index {
            label - 1
        } else {
            label
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub tokens: Vec<String>,
    pub raw_text: String,
    pub gold_label: Option<String>,
}

impl Clause {
    /// Builds a clause from raw text, lowercasing and whitespace-splitting it.
    pub fn from_text(text: &str, label: Option<String>) -> Self {
        Clause {
            tokens: tokenize(text),
            raw_text: text.to_string(),
            gold_label: label,
        }
    }
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub id: String,
    pub clauses: Vec<Clause>,
    pub fragment: Option<FragmentAnnotation>,
}

impl Paragraph {
    pub fn new(
        id: impl Into<String>,
        clauses: Vec<Clause>,
        fragment: Option<FragmentAnnotation>,
    ) -> Result<Self> {
        let id = id.into();
        if clauses.is_empty() {
            return Err(Error::Empty("paragraph has no clauses"));
        }
        if let Some(f) = &fragment {
            if f.len() != clauses.len() {
                return Err(Error::Length {
                    what: "fragment annotation vs clauses",
                    left: f.len(),
                    right: clauses.len(),
                });
            }
        }
        Ok(Paragraph {
            id,
            clauses,
            fragment,
        })
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Gold labels, or `None` if any clause is unlabeled.
    pub fn gold_labels(&self) -> Option<Vec<String>> {
        self.clauses.iter().map(|c| c.gold_label.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    #[default]
    Unsplit,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unsplit => "unsplit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub label_set: LabelSet,
    pub paragraphs: Vec<Paragraph>,
    pub split: Split,
}

impl Corpus {
    pub fn new(label_set: LabelSet, paragraphs: Vec<Paragraph>, split: Split) -> Result<Self> {
        for p in &paragraphs {
            for c in &p.clauses {
                if let Some(l) = &c.gold_label {
                    label_set.require(l)?;
                }
            }
        }
        Ok(Corpus {
            label_set,
            paragraphs,
            split,
        })
    }

    pub fn clause_count(&self) -> usize {
        self.paragraphs.iter().map(Paragraph::len).sum()
    }

    /// Shuffles paragraphs with `seed` and moves `ratio` of them (rounded,
    /// at least one when `ratio > 0` and there are two or more paragraphs)
    /// into the second corpus.
    pub fn split_off(&self, ratio: f64, seed: u64, held_out: Split) -> (Corpus, Corpus) {
        let mut order: Vec<usize> = (0..self.paragraphs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_out = holdout_count(self.paragraphs.len(), ratio);
        let (out, keep) = order.split_at(n_out);
        let pick = |idx: &[usize], split| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Corpus {
                label_set: self.label_set.clone(),
                paragraphs: idx.iter().map(|&i| self.paragraphs[i].clone()).collect(),
                split,
            }
        };
        (pick(keep, Split::Train), pick(out, held_out))
    }
}

pub(crate) fn holdout_count(n: usize, ratio: f64) -> usize {
    if n < 2 || ratio <= 0.0 {
        return 0;
    }
    ((n as f64 * ratio).round() as usize).clamp(1, n - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bio_size_follows_label_count() {
        assert_eq!(LabelSet::scidt().bio_size(), 15);
        assert_eq!(LabelSet::claim().bio_size(), 3);
        assert_eq!(LabelSet::rct().bio_size(), 11);
        assert_eq!(LabelSet::coda().bio_size(), 9);
    }

    #[test]
    fn bio_index_is_a_bijection() {
        for ls in [LabelSet::scidt(), LabelSet::coda(), LabelSet::claim()] {
            for i in 0..ls.bio_size() {
                let tag = ls.bio_tag(i);
                assert_eq!(ls.bio_index(tag), i);
                assert_eq!(ls.parse_bio_name(&ls.bio_name(tag)).unwrap(), tag);
            }
        }
    }

    #[test]
    fn label_set_rejects_bad_input() {
        assert!(LabelSet::new("x", ["a", "a"], "a").is_err());
        assert!(LabelSet::new("x", ["a", "b"], "c").is_err());
        assert!(LabelSet::new("x", Vec::<String>::new(), "c").is_err());
        assert!(LabelSet::new("x", ["a", ""], "a").is_err());
    }

    #[test]
    fn none_label_in_the_middle() {
        let ls = LabelSet::new("x", ["a", "none", "b"], "none").unwrap();
        assert_eq!(ls.bio_tag(0), BioTag::Begin(0));
        assert_eq!(ls.bio_tag(2), BioTag::Begin(2));
        assert_eq!(ls.bio_tag(4), BioTag::Outside);
        assert!(ls.parse_bio_name("B_none").is_err());
    }

    #[test]
    fn paragraph_requires_clauses() {
        assert!(Paragraph::new("p", vec![], None).is_err());
    }

    #[test]
    fn corpus_rejects_foreign_labels() {
        let p = Paragraph::new("p", vec![Clause::from_text("x", Some("bogus".into()))], None)
            .unwrap();
        assert!(matches!(
            Corpus::new(LabelSet::scidt(), vec![p], Split::Unsplit),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn tokenize_lowercases() {
        assert_eq!(tokenize("  We Examined\tIL-2 "), ["we", "examined", "il-2"]);
    }

    #[test]
    fn holdout_sizes() {
        assert_eq!(holdout_count(20, 0.1), 2);
        assert_eq!(holdout_count(1, 0.5), 0);
        assert_eq!(holdout_count(5, 0.01), 1);
        assert_eq!(holdout_count(3, 0.99), 2);
        assert_eq!(holdout_count(10, 0.0), 0);
    }
}
