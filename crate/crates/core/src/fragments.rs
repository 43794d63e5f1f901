//! Evidence fragment reduction: subfigure mentions, the block BIO codec and
//! pair-level fragment scoring.
//!
//! A *block* is a maximal run of contiguous clauses that refer to the same
//! non-empty set of subfigure codes. Encoding marks block starts with `B`,
//! continuations with `I` and unreferenced clauses with `O`. Decoding fills
//! every clause of a predicted block with the union of the codes explicitly
//! mentioned anywhere inside it.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CodeSet = BTreeSet<SubfigureCode>;

/// A figure number with an optional panel letter, e.g. `1A` or `3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SubfigureCode {
    figure: u32,
    panel: Option<char>,
}

impl SubfigureCode {
    pub fn new(figure: u32, panel: Option<char>) -> Result<Self> {
        if figure == 0 {
            return Err(Error::Format("figure numbers start at 1".into()));
        }
        let panel = match panel {
            Some(c) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
            Some(c) => return Err(Error::Format(format!("bad panel letter `{c}`"))),
            None => None,
        };
        Ok(SubfigureCode { figure, panel })
    }

    pub fn figure(&self) -> u32 {
        self.figure
    }

    pub fn panel(&self) -> Option<char> {
        self.panel
    }
}

impl fmt::Display for SubfigureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.figure)?;
        if let Some(p) = self.panel {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for SubfigureCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad subfigure code `{s}`"));
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        let figure: u32 = s[..digits].parse().map_err(|_| bad())?;
        let mut rest = s[digits..].chars();
        let panel = rest.next();
        if rest.next().is_some() {
            return Err(bad());
        }
        SubfigureCode::new(figure, panel).map_err(|_| bad())
    }
}

impl TryFrom<String> for SubfigureCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubfigureCode> for String {
    fn from(c: SubfigureCode) -> Self {
        c.to_string()
    }
}

/// Per-clause semantic references and explicit surface mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotation", into = "RawAnnotation")]
pub struct FragmentAnnotation {
    pub referred: Vec<CodeSet>,
    pub mentioned: Vec<CodeSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    referred: Vec<CodeSet>,
    mentioned: Vec<CodeSet>,
}

impl TryFrom<RawAnnotation> for FragmentAnnotation {
    type Error = Error;

    fn try_from(raw: RawAnnotation) -> Result<Self> {
        FragmentAnnotation::new(raw.referred, raw.mentioned)
    }
}

impl From<FragmentAnnotation> for RawAnnotation {
    fn from(a: FragmentAnnotation) -> Self {
        RawAnnotation {
            referred: a.referred,
            mentioned: a.mentioned,
        }
    }
}

impl FragmentAnnotation {
    pub fn new(referred: Vec<CodeSet>, mentioned: Vec<CodeSet>) -> Result<Self> {
        if referred.len() != mentioned.len() {
            return Err(Error::Length {
                what: "referred vs mentioned",
                left: referred.len(),
                right: mentioned.len(),
            });
        }
        Ok(FragmentAnnotation {
            referred,
            mentioned,
        })
    }

    pub fn len(&self) -> usize {
        self.referred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.referred.is_empty()
    }
}

/// Untyped block tags. The discriminant order is the decoding tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockTag {
    B,
    I,
    O,
}

impl BlockTag {
    pub const ALL: [BlockTag; 3] = [BlockTag::B, BlockTag::I, BlockTag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockTag::B => "B",
            BlockTag::I => "I",
            BlockTag::O => "O",
        }
    }
}

impl FromStr for BlockTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(BlockTag::B),
            "I" => Ok(BlockTag::I),
            "O" => Ok(BlockTag::O),
            _ => Err(Error::Format(format!("bad block tag `{s}`"))),
        }
    }
}

static TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]").expect("valid regex"));
static CODE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([0-9]+)([a-z]*)$").expect("valid regex"));

const MAX_RANGE: u32 = 26;

fn parse_code(tok: &str) -> Option<(u32, Vec<char>)> {
    let caps = CODE.captures(tok)?;
    let fig: u32 = caps[1].parse().ok().filter(|&f| f > 0)?;
    Some((fig, caps[2].chars().collect()))
}

fn single_letter(tok: &str) -> Option<char> {
    let mut cs = tok.chars();
    match (cs.next(), cs.next()) {
        (Some(c), None) if c.is_ascii_lowercase() => Some(c),
        _ => None,
    }
}

fn is_dash(tok: &str) -> bool {
    matches!(tok, "-" | "\u{2013}" | "\u{2014}")
}

struct MentionScan {
    out: CodeSet,
    fig: u32,
    panel: Option<char>,
}

impl MentionScan {
    fn push(&mut self, fig: u32, panel: Option<char>) {
        if let Ok(code) = SubfigureCode::new(fig, panel) {
            self.out.insert(code);
        }
        self.fig = fig;
        self.panel = panel;
    }

    fn push_code(&mut self, fig: u32, panels: &[char]) {
        if panels.is_empty() {
            self.push(fig, None);
        }
        for &p in panels {
            self.push(fig, Some(p));
        }
    }

    fn panel_range(&mut self, to: char) {
        if let Some(from) = self.panel {
            if to > from && (to as u32 - from as u32) <= MAX_RANGE {
                for c in (from as u8 + 1)..=(to as u8) {
                    self.push(self.fig, Some(c as char));
                }
                return;
            }
        }
        self.push(self.fig, Some(to));
    }
}

/// Extracts explicitly mentioned subfigure codes.
///
/// A mention is `fig`, `fig.`, `figs`, `figure` or `figures` (any case)
/// followed by a list of codes. A code is a figure number with optional
/// panel letters (`1a`, `2bc`). Lists are joined by `,`, `and` or `&`;
/// a lone letter after a separator is a panel of the most recent figure,
/// provided that figure was cited with a panel. Dashes denote panel ranges
/// (`3a-c`, `2b-2d`) or figure ranges (`2-4`).
pub fn extract_mentions(text: &str) -> CodeSet {
    let lowered = text.to_lowercase();
    let toks: Vec<&str> = TOKEN.find_iter(&lowered).map(|m| m.as_str()).collect();
    let mut scan = MentionScan {
        out: CodeSet::new(),
        fig: 0,
        panel: None,
    };
    let mut i = 0;
    while i < toks.len() {
        if !matches!(toks[i], "fig" | "figs" | "figure" | "figures") {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        if toks.get(j) == Some(&".") {
            j += 1;
        }
        let Some((fig, panels)) = toks.get(j).and_then(|t| parse_code(t)) else {
            i += 1;
            continue;
        };
        scan.push_code(fig, &panels);
        j += 1;
        while let Some(&sep) = toks.get(j) {
            let next = toks.get(j + 1).copied().unwrap_or_default();
            if is_dash(sep) {
                if let (Some(letter), Some(_)) = (single_letter(next), scan.panel) {
                    scan.panel_range(letter);
                } else if let Some((f2, p2)) = parse_code(next) {
                    match (p2.as_slice(), scan.panel) {
                        ([to], Some(_)) if f2 == scan.fig => scan.panel_range(*to),
                        ([], None) if f2 > scan.fig && f2 - scan.fig <= MAX_RANGE => {
                            for f in (scan.fig + 1)..=f2 {
                                scan.push(f, None);
                            }
                        }
                        _ => scan.push_code(f2, &p2),
                    }
                } else {
                    break;
                }
            } else if matches!(sep, "," | "and" | "&") {
                if let Some((f2, p2)) = parse_code(next) {
                    scan.push_code(f2, &p2);
                } else if let (Some(letter), Some(_)) = (single_letter(next), scan.panel) {
                    scan.push(scan.fig, Some(letter));
                } else {
                    break;
                }
            } else {
                break;
            }
            j += 2;
        }
        i = j;
    }
    scan.out
}

/// Empty set → `O`; a non-empty set equal to the previous clause's → `I`;
/// anything else → `B`.
pub fn encode_blocks(referred: &[CodeSet]) -> Vec<BlockTag> {
    let mut prev: Option<&CodeSet> = None;
    referred
        .iter()
        .map(|set| {
            let tag = if set.is_empty() {
                BlockTag::O
            } else if prev == Some(set) {
                BlockTag::I
            } else {
                BlockTag::B
            };
            prev = Some(set);
            tag
        })
        .collect()
}

/// Fills each predicted block with the union of the codes mentioned inside it.
/// A stray `I` (after `O` or at the start) opens a new block.
pub fn decode_blocks(bio: &[BlockTag], mentioned: &[CodeSet]) -> Result<Vec<CodeSet>> {
    if bio.len() != mentioned.len() {
        return Err(Error::Length {
            what: "block tags vs mentions",
            left: bio.len(),
            right: mentioned.len(),
        });
    }
    let mut out = vec![CodeSet::new(); bio.len()];
    let mut start = 0;
    while start < bio.len() {
        if bio[start] == BlockTag::O {
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end < bio.len() && bio[end] == BlockTag::I {
            end += 1;
        }
        let union: CodeSet = mentioned[start..end].iter().flatten().copied().collect();
        for set in &mut out[start..end] {
            set.clone_from(&union);
        }
        start = end;
    }
    Ok(out)
}

/// Micro-averaged counts over (clause, code) membership pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub clauses: usize,
    pub exact_clauses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragmentScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of clauses whose predicted set equals the gold set.
    pub clause_exact_match: f64,
}

impl FragmentCounts {
    pub fn add(&mut self, pred: &[CodeSet], gold: &[CodeSet]) -> Result<()> {
        if pred.len() != gold.len() {
            return Err(Error::Length {
                what: "predicted vs gold fragments",
                left: pred.len(),
                right: gold.len(),
            });
        }
        for (p, g) in pred.iter().zip(gold) {
            let tp = p.intersection(g).count();
            self.true_pos += tp;
            self.false_pos += p.len() - tp;
            self.false_neg += g.len() - tp;
            self.clauses += 1;
            self.exact_clauses += usize::from(p == g);
        }
        Ok(())
    }

    pub fn score(&self) -> FragmentScore {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_pos, self.true_pos + self.false_pos);
        let recall = ratio(self.true_pos, self.true_pos + self.false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        FragmentScore {
            precision,
            recall,
            f1,
            clause_exact_match: ratio(self.exact_clauses, self.clauses),
        }
    }
}

pub fn fragment_f1(pred: &[CodeSet], gold: &[CodeSet]) -> Result<FragmentScore> {
    let mut counts = FragmentCounts::default();
    counts.add(pred, gold)?;
    Ok(counts.score())
}
