//! Linear-chain CRF: partition function, negative log-likelihood, Viterbi
//! decoding and forward-backward marginals.
//!
//! Positions whose mask entry is `false` are skipped entirely; the chain runs
//! over the remaining positions in order.

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, Tape, Tensor, Var};

/// Transition scores `[K, K]` (row = previous tag) plus start and end vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub scores: Tensor,
    pub start: Tensor,
    pub end: Tensor,
}

impl Transitions {
    pub fn zeros(k: usize) -> Self {
        Transitions {
            scores: Tensor::zeros(&[k, k]),
            start: Tensor::zeros(&[k]),
            end: Tensor::zeros(&[k]),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn trans(&self, i: usize, j: usize) -> f64 {
        self.scores.data()[i * self.num_tags() + j]
    }

    fn check(&self, emissions: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
        let k = self.num_tags();
        if self.scores.shape() != [k, k] || self.end.shape() != [k] || self.start.shape() != [k] {
            return Err(Error::Shape(format!(
                "transitions {:?}, start {:?}, end {:?}",
                self.scores.shape(),
                self.start.shape(),
                self.end.shape()
            )));
        }
        if emissions.rank() != 2 || emissions.cols() != k {
            return Err(Error::Shape(format!("emissions {:?} for {k} tags", emissions.shape())));
        }
        if mask.len() != emissions.rows() {
            return Err(Error::Length {
                what: "mask vs emission rows",
                left: mask.len(),
                right: emissions.rows(),
            });
        }
        let active: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
        if active.is_empty() {
            return Err(Error::Empty("CRF sequence with no active positions"));
        }
        Ok(active)
    }
}

/// Forward recursion; returns `alpha[t][j]` for each active position.
fn forward_table(em: &Tensor, tr: &Transitions, active: &[usize]) -> Vec<Vec<f64>> {
    let k = tr.num_tags();
    let mut table = Vec::with_capacity(active.len());
    let first: Vec<f64> = (0..k).map(|j| tr.start.data()[j] + em.at(active[0], j)).collect();
    table.push(first);
    for &t in &active[1..] {
        let prev = table.last().expect("non-empty");
        let next: Vec<f64> = (0..k)
            .map(|j| logsumexp(&(0..k).map(|i| prev[i] + tr.trans(i, j)).collect::<Vec<_>>()).expect("k > 0") + em.at(t, j))
            .collect();
        table.push(next);
    }
    table
}

fn backward_table(em: &Tensor, tr: &Transitions, active: &[usize]) -> Vec<Vec<f64>> {
    let k = tr.num_tags();
    let n = active.len();
    let mut table = vec![Vec::new(); n];
    table[n - 1] = tr.end.data().to_vec();
    for s in (0..n - 1).rev() {
        let t_next = active[s + 1];
        let next = &table[s + 1];
        table[s] = (0..k)
            .map(|i| logsumexp(&(0..k).map(|j| tr.trans(i, j) + em.at(t_next, j) + next[j]).collect::<Vec<_>>()).expect("k > 0"))
            .collect();
    }
    table
}

pub fn log_partition(emissions: &Tensor, transitions: &Transitions, mask: &[bool]) -> Result<f64> {
    let active = transitions.check(emissions, mask)?;
    let table = forward_table(emissions, transitions, &active);
    let last = table.last().expect("non-empty");
    let ends: Vec<f64> = last.iter().zip(transitions.end.data()).map(|(a, e)| a + e).collect();
    logsumexp(&ends)
}

/// Unnormalised score of a tag path. `tags` has one entry per position;
/// entries at masked positions are ignored.
pub fn path_score(emissions: &Tensor, transitions: &Transitions, tags: &[usize], mask: &[bool]) -> Result<f64> {
    let active = transitions.check(emissions, mask)?;
    check_tags(tags, mask.len(), transitions.num_tags())?;
    let mut score = transitions.start.data()[tags[active[0]]];
    for (s, &t) in active.iter().enumerate() {
        score += emissions.at(t, tags[t]);
        if s > 0 {
            score += transitions.trans(tags[active[s - 1]], tags[t]);
        }
    }
    score += transitions.end.data()[tags[*active.last().expect("non-empty")]];
    Ok(score)
}

fn check_tags(tags: &[usize], n: usize, k: usize) -> Result<()> {
    if tags.len() != n {
        return Err(Error::Length {
            what: "gold tags vs emission rows",
            left: tags.len(),
            right: n,
        });
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= k) {
        return Err(Error::Shape(format!("tag index {bad} out of range for {k} tags")));
    }
    Ok(())
}

pub fn nll(emissions: &Tensor, transitions: &Transitions, gold: &[usize], mask: &[bool]) -> Result<f64> {
    let z = log_partition(emissions, transitions, mask)?;
    Ok(z - path_score(emissions, transitions, gold, mask)?)
}

/// Highest-scoring tag path over the active positions (one tag per active
/// position, in order). Ties go to the lowest tag index.
pub fn viterbi(emissions: &Tensor, transitions: &Transitions, mask: &[bool]) -> Result<Vec<usize>> {
    let active = transitions.check(emissions, mask)?;
    let k = transitions.num_tags();
    let mut score: Vec<f64> = (0..k).map(|j| transitions.start.data()[j] + emissions.at(active[0], j)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(active.len());
    for &t in &active[1..] {
        let mut next = vec![0.0; k];
        let mut ptr = vec![0; k];
        for j in 0..k {
            let (best_i, best) = argmax((0..k).map(|i| score[i] + transitions.trans(i, j)));
            next[j] = best + emissions.at(t, j);
            ptr[j] = best_i;
        }
        score = next;
        back.push(ptr);
    }
    let (mut tag, _) = argmax((0..k).map(|j| score[j] + transitions.end.data()[j]));
    let mut path = vec![tag];
    for ptr in back.iter().rev() {
        tag = ptr[tag];
        path.push(tag);
    }
    path.reverse();
    Ok(path)
}

// First index of the maximum; NaN never wins.
fn argmax(it: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 || i == 0 && !v.is_nan() {
            best = (i, v);
        }
    }
    best
}

/// Posterior marginals of a chain.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_z: f64,
    /// `[n, K]`, zero rows at masked positions.
    pub unary: Tensor,
    /// `[K, K]`, summed over adjacent active pairs.
    pub pairwise: Tensor,
}

pub fn marginals(emissions: &Tensor, transitions: &Transitions, mask: &[bool]) -> Result<Marginals> {
    let active = transitions.check(emissions, mask)?;
    let k = transitions.num_tags();
    let alpha = forward_table(emissions, transitions, &active);
    let beta = backward_table(emissions, transitions, &active);
    let last = alpha.last().expect("non-empty");
    let log_z = logsumexp(&last.iter().zip(transitions.end.data()).map(|(a, e)| a + e).collect::<Vec<_>>())?;
    let mut unary = Tensor::zeros(&[mask.len(), k]);
    for (s, &t) in active.iter().enumerate() {
        for j in 0..k {
            unary.data_mut()[t * k + j] = (alpha[s][j] + beta[s][j] - log_z).exp();
        }
    }
    let mut pairwise = Tensor::zeros(&[k, k]);
    for s in 1..active.len() {
        let t = active[s];
        for i in 0..k {
            for j in 0..k {
                let lp = alpha[s - 1][i] + transitions.trans(i, j) + emissions.at(t, j) + beta[s][j] - log_z;
                pairwise.data_mut()[i * k + j] += lp.exp();
            }
        }
    }
    Ok(Marginals { log_z, unary, pairwise })
}

/// Differentiable CRF negative log-likelihood over every row of `emissions`
/// (`[n, K]`). `transitions` is `[K, K]`, `start` and `end` are `[K]`.
pub(crate) fn nll_on_tape(
    tape: &mut Tape,
    emissions: Var,
    transitions: Var,
    start: Var,
    end: Var,
    gold: &[usize],
) -> Result<Var> {
    let shape = tape.shape(emissions).to_vec();
    let (n, k) = (shape[0], shape[1]);
    check_tags(gold, n, k)?;
    if n == 0 {
        return Err(Error::Empty("CRF sequence with no positions"));
    }
    let row = tape.select_rows(emissions, vec![0])?;
    let mut alpha = tape.add(row, start)?;
    for t in 1..n {
        let col = tape.reshape(alpha, &[k, 1])?;
        let scores = tape.add(transitions, col)?;
        let reduced = tape.logsumexp(scores, Some(0))?;
        let row = tape.select_rows(emissions, vec![t])?;
        alpha = tape.add(row, reduced)?;
    }
    let last = tape.add(alpha, end)?;
    let log_z = tape.logsumexp(last, None)?;

    let em_idx: Vec<usize> = gold.iter().enumerate().map(|(t, &y)| t * k + y).collect();
    let em = tape.gather(emissions, em_idx)?;
    let mut gold_score = tape.sum(em);
    if n > 1 {
        let tr_idx: Vec<usize> = gold.windows(2).map(|w| w[0] * k + w[1]).collect();
        let tr = tape.gather(transitions, tr_idx)?;
        let tr = tape.sum(tr);
        gold_score = tape.add(gold_score, tr)?;
    }
    let s = tape.gather(start, vec![gold[0]])?;
    let s = tape.sum(s);
    let e = tape.gather(end, vec![gold[n - 1]])?;
    let e = tape.sum(e);
    gold_score = tape.add(gold_score, s)?;
    gold_score = tape.add(gold_score, e)?;
    let neg = tape.scale(gold_score, -1.0);
    tape.add(log_z, neg)
}
