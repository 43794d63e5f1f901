//! Dataset importers and writers.
//!
//! * RCT: blank-line separated records, each headed by `###<id>` and followed
//!   by `LABEL<TAB>sentence` lines.
//! * SciDT: one `paragraph_id<TAB>clause_index<TAB>clause_text<TAB>label` row
//!   per clause; an optional header row is skipped.
//! * CODA: JSON Lines, one `{"id", "fragments": [{"text", "label"}]}` object
//!   per abstract.
//! * Canonical JSONL: an optional `{"label_set", "split"}` header line, then
//!   one paragraph object per line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Clause, Corpus, LabelSet, Paragraph, Split};
use crate::error::{Error, Result};
use crate::fragments::FragmentAnnotation;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn clause_text(c: &Clause) -> String {
    if c.raw_text.is_empty() {
        c.tokens.join(" ")
    } else {
        c.raw_text.clone()
    }
}

fn check_label(label_set: &LabelSet, label: &str, line: usize) -> Result<String> {
    let label = label.trim().to_lowercase();
    // lowercasing means the synthetic none label can never match
    if label_set.contains(&label) {
        Ok(label)
    } else {
        Err(Error::parse(line, format!("unknown label `{label}`")))
    }
}

pub fn parse_rct(path: impl AsRef<Path>) -> Result<Corpus> {
    parse_rct_str(&read(path.as_ref())?)
}

pub fn parse_rct_str(text: &str) -> Result<Corpus> {
    let label_set = LabelSet::rct();
    let mut paragraphs = Vec::new();
    let mut current: Option<(String, usize, Vec<Clause>)> = None;

    let flush = |cur: &mut Option<(String, usize, Vec<Clause>)>,
                 out: &mut Vec<Paragraph>|
     -> Result<()> {
        if let Some((id, line, clauses)) = cur.take() {
            if clauses.is_empty() {
                return Err(Error::parse(line, format!("record `{id}` has no sentences")));
            }
            out.push(Paragraph::new(id, clauses, None)?);
        }
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current, &mut paragraphs)?;
            continue;
        }
        if let Some(id) = line.strip_prefix("###") {
            flush(&mut current, &mut paragraphs)?;
            current = Some((id.trim().to_string(), lineno, Vec::new()));
            continue;
        }
        let Some((_, _, clauses)) = current.as_mut() else {
            return Err(Error::parse(lineno, "sentence line outside a ### record"));
        };
        let (label, sentence) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected LABEL<TAB>sentence"))?;
        let label = check_label(&label_set, label, lineno)?;
        clauses.push(Clause::from_text(sentence, Some(label)));
    }
    flush(&mut current, &mut paragraphs)?;
    Corpus::new(label_set, paragraphs, Split::Unsplit)
}

pub fn write_rct(corpus: &Corpus) -> String {
    let mut out = String::new();
    for p in &corpus.paragraphs {
        let _ = writeln!(out, "###{}", p.id);
        for c in &p.clauses {
            let label = c.gold_label.as_deref().unwrap_or_default().to_uppercase();
            let _ = writeln!(out, "{label}\t{}", clause_text(c));
        }
        out.push('\n');
    }
    out
}

pub fn parse_scidt(path: impl AsRef<Path>) -> Result<Corpus> {
    parse_scidt_str(&read(path.as_ref())?)
}

pub fn parse_scidt_str(text: &str) -> Result<Corpus> {
    let label_set = LabelSet::scidt();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, usize, Clause)>> = HashMap::new();

    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let header = std::mem::take(&mut first) && cols.get(1).is_some_and(|c| c.trim() == "clause_index");
        if header {
            continue;
        }
        let [pid, idx, text, label] = cols[..] else {
            return Err(Error::parse(
                lineno,
                format!("expected 4 tab-separated columns, found {}", cols.len()),
            ));
        };
        let idx: i64 = idx
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad clause index `{idx}`")))?;
        let label = check_label(&label_set, label, lineno)?;
        let pid = pid.trim().to_string();
        let entry = rows.entry(pid.clone()).or_insert_with(|| {
            order.push(pid);
            Vec::new()
        });
        entry.push((idx, lineno, Clause::from_text(text, Some(label))));
    }

    let mut paragraphs = Vec::with_capacity(order.len());
    for pid in order {
        let mut clauses = rows.remove(&pid).unwrap_or_default();
        clauses.sort_by_key(|(idx, line, _)| (*idx, *line));
        let start = clauses[0].0;
        if start != 0 && start != 1 {
            return Err(Error::parse(
                clauses[0].1,
                format!("paragraph `{pid}` starts at clause index {start}"),
            ));
        }
        for (k, (idx, line, _)) in clauses.iter().enumerate() {
            if *idx != start + k as i64 {
                return Err(Error::parse(
                    *line,
                    format!("paragraph `{pid}` has non-contiguous clause index {idx}"),
                ));
            }
        }
        let clauses = clauses.into_iter().map(|(_, _, c)| c).collect();
        paragraphs.push(Paragraph::new(pid, clauses, None)?);
    }
    Corpus::new(label_set, paragraphs, Split::Unsplit)
}

pub fn write_scidt(corpus: &Corpus) -> String {
    let mut out = String::new();
    for p in &corpus.paragraphs {
        for (i, c) in p.clauses.iter().enumerate() {
            let label = c.gold_label.as_deref().unwrap_or_default();
            let _ = writeln!(out, "{}\t{i}\t{}\t{label}", p.id, clause_text(c));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodaRecord {
    id: String,
    fragments: Vec<CodaFragment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodaFragment {
    text: String,
    label: String,
}

pub fn parse_coda(path: impl AsRef<Path>) -> Result<Corpus> {
    parse_coda_str(&read(path.as_ref())?)
}

pub fn parse_coda_str(text: &str) -> Result<Corpus> {
    let label_set = LabelSet::coda();
    let mut paragraphs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CodaRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if rec.fragments.is_empty() {
            return Err(Error::parse(lineno, format!("abstract `{}` has no fragments", rec.id)));
        }
        let clauses = rec
            .fragments
            .iter()
            .map(|f| Ok(Clause::from_text(&f.text, Some(check_label(&label_set, &f.label, lineno)?))))
            .collect::<Result<Vec<_>>>()?;
        paragraphs.push(Paragraph::new(rec.id, clauses, None)?);
    }
    Corpus::new(label_set, paragraphs, Split::Unsplit)
}

pub fn write_coda(corpus: &Corpus) -> String {
    let mut out = String::new();
    for p in &corpus.paragraphs {
        let rec = CodaRecord {
            id: p.id.clone(),
            fragments: p
                .clauses
                .iter()
                .map(|c| CodaFragment {
                    text: clause_text(c),
                    label: c.gold_label.clone().unwrap_or_default(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    label_set: LabelSet,
    #[serde(default)]
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParagraphRecord {
    id: String,
    clauses: Vec<ClauseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fragment: Option<FragmentAnnotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClauseRecord {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub fn parse_jsonl(path: impl AsRef<Path>, default: Option<&LabelSet>) -> Result<Corpus> {
    parse_jsonl_str(&read(path.as_ref())?, default)
}

/// Parses the canonical interchange format. The label set comes from the
/// header line when present, otherwise `default`, otherwise the first
/// built-in taxonomy that covers every gold label.
pub fn parse_jsonl_str(text: &str, default: Option<&LabelSet>) -> Result<Corpus> {
    let mut header: Option<HeaderRecord> = None;
    let mut paragraphs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if value.get("label_set").is_some() {
            if header.is_some() || !paragraphs.is_empty() {
                return Err(Error::parse(lineno, "header must be the first record"));
            }
            header = Some(
                serde_json::from_value(value).map_err(|e| Error::parse(lineno, e.to_string()))?,
            );
            continue;
        }
        let rec: ParagraphRecord =
            serde_json::from_value(value).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let clauses = rec
            .clauses
            .into_iter()
            .map(|c| {
                let tokens = if c.tokens.is_empty() {
                    super::tokenize(&c.text)
                } else {
                    c.tokens
                };
                Clause {
                    tokens,
                    raw_text: c.text,
                    gold_label: c.label,
                }
            })
            .collect();
        let p = Paragraph::new(rec.id, clauses, rec.fragment)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        paragraphs.push(p);
    }

    let (label_set, split) = match header {
        Some(h) => (h.label_set, h.split),
        None => match default {
            Some(ls) => (ls.clone(), Split::Unsplit),
            None => (infer_label_set(&paragraphs)?, Split::Unsplit),
        },
    };
    Corpus::new(label_set, paragraphs, split)
}

fn infer_label_set(paragraphs: &[Paragraph]) -> Result<LabelSet> {
    let labels: Vec<&str> = paragraphs
        .iter()
        .flat_map(|p| p.clauses.iter().filter_map(|c| c.gold_label.as_deref()))
        .collect();
    if labels.is_empty() {
        return Err(Error::LabelSet(
            "corpus has no gold labels and no header; cannot infer the label set".into(),
        ));
    }
    ["scidt", "rct", "coda", "claim"]
        .into_iter()
        .filter_map(LabelSet::builtin)
        .find(|ls| labels.iter().all(|l| ls.contains(l)))
        .ok_or_else(|| {
            Error::LabelSet("labels match no built-in taxonomy; add a header line".into())
        })
}

pub fn write_jsonl(corpus: &Corpus) -> String {
    let mut out = serde_json::to_string(&HeaderRecord {
        label_set: corpus.label_set.clone(),
        split: corpus.split,
    })
    .expect("serializable");
    out.push('\n');
    for p in &corpus.paragraphs {
        let rec = ParagraphRecord {
            id: p.id.clone(),
            clauses: p
                .clauses
                .iter()
                .map(|c| ClauseRecord {
                    tokens: c.tokens.clone(),
                    text: c.raw_text.clone(),
                    label: c.gold_label.clone(),
                })
                .collect(),
            fragment: p.fragment.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}
