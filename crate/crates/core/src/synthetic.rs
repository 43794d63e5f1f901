//! Generated corpora with known structure, used by fixtures and end-to-end
//! checks: keyword-deterministic discourse paragraphs, label relabelings and
//! fragment paragraphs whose gold-BIO decode score is known in advance.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Clause, Corpus, LabelSet, Paragraph, Split};
use crate::error::{Error, Result};
use crate::fragments::{CodeSet, FragmentAnnotation, FragmentCounts, SubfigureCode};

const FILLER: &[&str] = &[
    "we", "the", "of", "in", "was", "were", "this", "that", "these", "cells", "levels", "protein",
    "expression", "samples", "observed", "increased", "reduced", "mice", "data", "analysis",
    "using", "after", "treatment", "response", "signal", "model", "with", "from", "into", "both",
];

/// Token that marks a clause of `label` in keyword corpora.
pub fn cue(label: &str) -> String {
    format!("cue_{}", label.replace(|c: char| c.is_whitespace(), "_"))
}

fn filler(rng: &mut ChaCha8Rng, range: std::ops::RangeInclusive<usize>) -> Vec<&'static str> {
    let n = rng.gen_range(range);
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect()
}

/// Paragraphs of 3 to 8 clauses made of label runs of length 1 to 3. Each
/// clause holds 2 to 6 filler words plus the cue token of its label.
pub fn keyword_corpus(label_set: &LabelSet, paragraphs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(paragraphs);
    for p in 0..paragraphs {
        let n = rng.gen_range(3..=8);
        let mut clauses = Vec::with_capacity(n);
        while clauses.len() < n {
            let label = label_set.label(rng.gen_range(0..label_set.len())).to_string();
            for _ in 0..rng.gen_range(1..=3).min(n - clauses.len()) {
                let mut words = filler(&mut rng, 2..=6);
                let c = cue(&label);
                words.insert(rng.gen_range(0..=words.len()), &c);
                clauses.push(Clause::from_text(&words.join(" "), Some(label.clone())));
            }
        }
        out.push(Paragraph::new(format!("kw{seed}-{p}"), clauses, None).expect("non-empty paragraph"));
    }
    Corpus::new(label_set.clone(), out, Split::Unsplit).expect("labels come from the label set")
}

/// Rewrites every gold label through `map` into `target`.
pub fn relabel(corpus: &Corpus, map: &BTreeMap<String, String>, target: &LabelSet) -> Result<Corpus> {
    let mut paragraphs = corpus.paragraphs.clone();
    for p in &mut paragraphs {
        for c in &mut p.clauses {
            if let Some(l) = &c.gold_label {
                let to = map.get(l).ok_or_else(|| Error::UnknownLabel { label: l.clone(), label_set: "relabel map".into() })?;
                c.gold_label = Some(to.clone());
            }
        }
    }
    Corpus::new(target.clone(), paragraphs, corpus.split)
}

/// A uniformly random bijection of a label set onto itself.
pub fn random_permutation(label_set: &LabelSet, seed: u64) -> BTreeMap<String, String> {
    let mut image = label_set.labels().to_vec();
    image.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    label_set.labels().iter().cloned().zip(image).collect()
}

/// A generated fragment corpus together with the exact counts a gold-BIO
/// decode of it must produce.
#[derive(Debug, Clone)]
pub struct FragmentFixture {
    pub corpus: Corpus,
    pub expected: FragmentCounts,
    pub blocks: usize,
    pub violating: usize,
}

fn mention_text(codes: &[SubfigureCode]) -> String {
    let names: Vec<String> = codes.iter().map(|c| c.to_string().to_lowercase()).collect();
    match names.as_slice() {
        [one] => format!("(figure {one})"),
        [init @ .., last] => format!("(figs. {} and {last})", init.join(", ")),
        [] => String::new(),
    }
}

fn random_code(rng: &mut ChaCha8Rng) -> SubfigureCode {
    let panel = (b'a' + rng.gen_range(0..4u8)) as char;
    SubfigureCode::new(rng.gen_range(1..=4), Some(panel)).expect("valid code")
}

/// Paragraphs of 2 to 5 blocks, each 1 to 4 clauses referring to one or two
/// subfigure codes, with optional unreferenced gaps. Compliant blocks mention
/// every referred code somewhere inside; `round(violation_rate * blocks)`
/// randomly chosen blocks instead mention a foreign code in place of one
/// referred code.
///
/// Gold discourse labels (scidt taxonomy) carry boundary signal: block
/// openings are mostly `method`, continuations mostly `result`, gaps draw
/// from the remaining labels.
pub fn fragment_corpus(paragraphs: usize, violation_rate: f64, seed: u64) -> FragmentFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = LabelSet::scidt();
    let gap_labels = ["goal", "fact", "hypothesis", "problem", "implication", "none"];
    let noisy = |rng: &mut ChaCha8Rng, main: &str| -> String {
        if rng.gen_bool(0.85) {
            main.to_string()
        } else {
            labels.label(rng.gen_range(0..labels.len())).to_string()
        }
    };

    // block layout first so violations can be drawn without replacement
    struct Block {
        para: usize,
        start: usize,
        len: usize,
        referred: Vec<SubfigureCode>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut layouts: Vec<Vec<(CodeSet, String)>> = Vec::with_capacity(paragraphs);
    for p in 0..paragraphs {
        let mut clauses: Vec<(CodeSet, String)> = Vec::new();
        let mut prev = CodeSet::new();
        for _ in 0..rng.gen_range(2..=5) {
            if rng.gen_bool(0.4) {
                for _ in 0..rng.gen_range(1..=2) {
                    let l = gap_labels.choose(&mut rng).expect("non-empty").to_string();
                    clauses.push((CodeSet::new(), l));
                }
            }
            let referred = loop {
                let mut set = CodeSet::from([random_code(&mut rng)]);
                if rng.gen_bool(0.5) {
                    set.insert(random_code(&mut rng));
                }
                if set != prev {
                    break set;
                }
            };
            let len = rng.gen_range(1..=4);
            blocks.push(Block { para: p, start: clauses.len(), len, referred: referred.iter().copied().collect() });
            for k in 0..len {
                let l = noisy(&mut rng, if k == 0 { "method" } else { "result" });
                clauses.push((referred.clone(), l));
            }
            prev = referred;
        }
        if rng.gen_bool(0.3) {
            clauses.push((CodeSet::new(), gap_labels.choose(&mut rng).expect("non-empty").to_string()));
        }
        layouts.push(clauses);
    }

    let n_violating = ((blocks.len() as f64) * violation_rate).round() as usize;
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut rng);
    let mut violates = vec![false; blocks.len()];
    for &b in &order[..n_violating.min(blocks.len())] {
        violates[b] = true;
    }

    let mut mentions: Vec<Vec<Vec<SubfigureCode>>> = layouts.iter().map(|c| vec![Vec::new(); c.len()]).collect();
    let mut expected = FragmentCounts::default();
    for (b, block) in blocks.iter().enumerate() {
        let mut shown = block.referred.clone();
        let (n, r) = (block.len, block.referred.len());
        if violates[b] {
            let slot = rng.gen_range(0..shown.len());
            shown[slot] = loop {
                let x = random_code(&mut rng);
                if !block.referred.contains(&x) {
                    break x;
                }
            };
            expected.true_pos += n * (r - 1);
            expected.false_pos += n;
            expected.false_neg += n;
        } else {
            expected.true_pos += n * r;
            expected.exact_clauses += n;
        }
        for code in shown {
            let at = block.start + rng.gen_range(0..n);
            mentions[block.para][at].push(code);
        }
    }

    let mut out = Vec::with_capacity(paragraphs);
    for (p, layout) in layouts.into_iter().enumerate() {
        let mut clauses = Vec::with_capacity(layout.len());
        let mut referred = Vec::with_capacity(layout.len());
        let mut mentioned = Vec::with_capacity(layout.len());
        for ((refs, label), codes) in layout.into_iter().zip(&mentions[p]) {
            let mut text = filler(&mut rng, 3..=7).join(" ");
            let mut codes = codes.clone();
            codes.sort();
            codes.dedup();
            if !codes.is_empty() {
                text.push(' ');
                text.push_str(&mention_text(&codes));
            }
            expected.clauses += 1;
            if refs.is_empty() {
                expected.exact_clauses += 1;
            }
            clauses.push(Clause::from_text(&text, Some(label)));
            referred.push(refs);
            mentioned.push(codes.into_iter().collect());
        }
        let ann = FragmentAnnotation::new(referred, mentioned).expect("aligned");
        out.push(Paragraph::new(format!("frag{seed}-{p}"), clauses, Some(ann)).expect("non-empty paragraph"));
    }
    let corpus = Corpus::new(labels, out, Split::Unsplit).expect("labels come from the label set");
    FragmentFixture { corpus, expected, blocks: blocks.len(), violating: n_violating }
}
