//! Evaluation measures over flat, aligned label sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};

fn aligned<A, B>(what: &'static str, a: &[A], b: &[B]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Length { what, left: a.len(), right: b.len() })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged F1 over single-label items, which is plain accuracy.
/// Zero for empty input.
pub fn micro_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Result<f64> {
    aligned("predicted vs gold labels", pred, gold)?;
    let correct = pred.iter().zip(gold).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(ratio(correct, gold.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro precision/recall/F1 with `none` removed from both sides: a
/// prediction counts only when it is not `none`, a gold item only when its
/// label is not `none`.
pub fn micro_prf_excluding<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T], none: &str) -> Result<Prf> {
    aligned("predicted vs gold labels", pred, gold)?;
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        n_pred += usize::from(p != none);
        n_gold += usize::from(g != none);
        tp += usize::from(p != none && p == g);
    }
    let (precision, recall) = (ratio(tp, n_pred), ratio(tp, n_gold));
    Ok(Prf { precision, recall, f1: harmonic(precision, recall) })
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn binary_f1(pred: &[bool], gold: &[bool]) -> Result<f64> {
    aligned("predicted vs gold labels", pred, gold)?;
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count();
    let n_pred = pred.iter().filter(|p| **p).count();
    let n_gold = gold.iter().filter(|g| **g).count();
    Ok(harmonic(ratio(tp, n_pred), ratio(tp, n_gold)))
}

/// Rows are gold labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gold\\pred");
        for l in &self.labels {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T], label_set: &LabelSet) -> Result<ConfusionMatrix> {
    aligned("predicted vs gold labels", pred, gold)?;
    let k = label_set.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (p, g) in pred.iter().zip(gold) {
        let gi = label_set.require(g.as_ref())?;
        let pi = label_set.require(p.as_ref())?;
        counts[gi][pi] += 1;
    }
    Ok(ConfusionMatrix { labels: label_set.labels().to_vec(), counts })
}

/// Cohen's kappa between two annotations over the union of their labels.
/// Returns 1 when chance agreement is 1 and the sequences agree, and 0 for
/// empty input.
pub fn cohen_kappa<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Result<f64> {
    aligned("annotation sequences", a, b)?;
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut ma: BTreeMap<&str, usize> = BTreeMap::new();
    let mut mb: BTreeMap<&str, usize> = BTreeMap::new();
    let mut agree = 0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_ref(), y.as_ref());
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
        agree += usize::from(x == y);
    }
    let universe: BTreeSet<&str> = ma.keys().chain(mb.keys()).copied().collect();
    let nf = n as f64;
    let p_o = agree as f64 / nf;
    let p_e: f64 = universe
        .iter()
        .map(|l| (ma.get(l).copied().unwrap_or(0) as f64 / nf) * (mb.get(l).copied().unwrap_or(0) as f64 / nf))
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if agree == n { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McNemar {
    /// Items only the first system gets right.
    pub b: u64,
    /// Items only the second system gets right.
    pub c: u64,
    /// Continuity-corrected chi-square statistic.
    pub statistic: f64,
    pub p_value: f64,
    /// Whether `p_value` comes from the exact binomial test.
    pub exact: bool,
}

/// Below this many discordant pairs the exact variant is used when requested.
pub const EXACT_BELOW: u64 = 25;

/// McNemar's paired test. With `exact_small`, discordant totals under
/// [`EXACT_BELOW`] use the two-sided binomial p-value instead of chi-square.
pub fn mcnemar<S: AsRef<str>, T: AsRef<str>, U: AsRef<str>>(pred_a: &[S], pred_b: &[T], gold: &[U], exact_small: bool) -> Result<McNemar> {
    aligned("first predictions vs gold", pred_a, gold)?;
    aligned("second predictions vs gold", pred_b, gold)?;
    let (mut b, mut c) = (0u64, 0u64);
    for ((x, y), g) in pred_a.iter().zip(pred_b).zip(gold) {
        let g = g.as_ref();
        match (x.as_ref() == g, y.as_ref() == g) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_counts(b, c, exact_small))
}

pub fn mcnemar_counts(b: u64, c: u64, exact_small: bool) -> McNemar {
    let n = b + c;
    if n == 0 {
        return McNemar { b, c, statistic: 0.0, p_value: 1.0, exact: false };
    }
    // not clamped at zero: b == c gives 1/(b+c)
    let statistic = ((b as f64 - c as f64).abs() - 1.0).powi(2) / n as f64;
    if exact_small && n < EXACT_BELOW {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        let p = (2.0 * dist.cdf(b.min(c))).min(1.0);
        return McNemar { b, c, statistic, p_value: p, exact: true };
    }
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    McNemar { b, c, statistic, p_value: chi.sf(statistic), exact: false }
}
