//! Feature-based linear-chain CRF over B/I/O block tags.
//!
//! Each clause contributes n-gram, discourse-tag and figure-mention features,
//! copied into the `prev:`/`cur:`/`next:` namespaces of its neighbours. Training
//! minimises the L2-penalised negative conditional log-likelihood with L-BFGS.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use crate::corpus::Paragraph;
use crate::error::{Error, Result};
use crate::fragments::{BlockTag, CodeSet};
use crate::numeric::Tensor;
use crate::tagger::crf::{self, Transitions};

pub type FeatureVector = BTreeSet<String>;

const TAGS: usize = 3;

/// Un-namespaced features of one clause.
fn clause_features(tokens: &[String], tag: Option<&str>, mentions: &CodeSet) -> Vec<String> {
    let toks: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut out = Vec::new();
    for t in &toks {
        out.push(format!("uni:{t}"));
    }
    for w in toks.windows(2) {
        out.push(format!("bi:{}_{}", w[0], w[1]));
    }
    for w in toks.windows(3) {
        out.push(format!("tri:{}_{}_{}", w[0], w[1], w[2]));
    }
    if let Some(tag) = tag {
        out.push(format!("tag:{tag}"));
    }
    for code in mentions {
        out.push(format!("fig:{code}"));
    }
    out.push(if mentions.is_empty() { "fig:none".to_string() } else { "fig:any".to_string() });
    out
}

/// Windowed feature sets, one per clause.
pub fn extract_features(paragraph: &Paragraph, discourse_tags: Option<&[String]>, mentions: &[CodeSet]) -> Result<Vec<FeatureVector>> {
    let n = paragraph.len();
    if mentions.len() != n {
        return Err(Error::Length { what: "mention sets vs clauses", left: mentions.len(), right: n });
    }
    if let Some(tags) = discourse_tags {
        if tags.len() != n {
            return Err(Error::Length { what: "discourse tags vs clauses", left: tags.len(), right: n });
        }
    }
    let base: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let tag = discourse_tags.map(|t| t[i].as_str());
            clause_features(&paragraph.clauses[i].tokens, tag, &mentions[i])
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut fv = FeatureVector::new();
        fv.insert("cur:bias".to_string());
        fv.extend(base[i].iter().map(|f| format!("cur:{f}")));
        match i.checked_sub(1) {
            Some(j) => fv.extend(base[j].iter().map(|f| format!("prev:{f}"))),
            None => {
                fv.insert("prev:BOS".to_string());
            }
        }
        match base.get(i + 1) {
            Some(next) => fv.extend(next.iter().map(|f| format!("next:{f}"))),
            None => {
                fv.insert("next:EOS".to_string());
            }
        }
        out.push(fv);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatCrfModel {
    /// Per-feature weights for B, I, O.
    pub weights: BTreeMap<String, [f64; TAGS]>,
    /// `transitions[prev][next]`, tags ordered B, I, O.
    pub transitions: [[f64; TAGS]; TAGS],
    pub l2: f64,
}

/// Optimisation trace of [`train_featcrf`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatCrfReport {
    /// Penalised log-likelihood after every accepted iterate (starting at zero weights).
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl FeatCrfModel {
    pub fn zeros(l2: f64) -> Self {
        FeatCrfModel { weights: BTreeMap::new(), transitions: [[0.0; TAGS]; TAGS], l2 }
    }

    pub fn emissions(&self, features: &[FeatureVector]) -> Tensor {
        let mut em = Tensor::zeros(&[features.len(), TAGS]);
        for (t, fv) in features.iter().enumerate() {
            for f in fv {
                if let Some(w) = self.weights.get(f) {
                    for k in 0..TAGS {
                        em.data_mut()[t * TAGS + k] += w[k];
                    }
                }
            }
        }
        em
    }

    fn crf_transitions(&self) -> Transitions {
        Transitions {
            scores: Tensor::from_fn(&[TAGS, TAGS], |i| self.transitions[i / TAGS][i % TAGS]),
            start: Tensor::zeros(&[TAGS]),
            end: Tensor::zeros(&[TAGS]),
        }
    }

    /// Conditional log-likelihood of gold sequences (no penalty).
    pub fn log_likelihood(&self, data: &[(Vec<FeatureVector>, Vec<BlockTag>)]) -> Result<f64> {
        let tr = self.crf_transitions();
        let mut ll = 0.0;
        for (fs, gold) in data {
            let em = self.emissions(fs);
            let g: Vec<usize> = gold.iter().map(|t| t.index()).collect();
            ll -= crf::nll(&em, &tr, &g, &vec![true; fs.len()])?;
        }
        Ok(ll)
    }

    /// Sorted text table: header, transitions, then one line per non-zero
    /// (feature, tag) weight.
    pub fn to_text(&self) -> String {
        let mut out = String::from("featcrf\t1\n");
        let _ = writeln!(out, "l2\t{:?}", self.l2);
        for (i, a) in BlockTag::ALL.iter().enumerate() {
            for (j, b) in BlockTag::ALL.iter().enumerate() {
                let _ = writeln!(out, "trans\t{}\t{}\t{:?}", a.as_str(), b.as_str(), self.transitions[i][j]);
            }
        }
        for (f, w) in &self.weights {
            for (k, tag) in BlockTag::ALL.iter().enumerate() {
                if w[k] != 0.0 {
                    let _ = writeln!(out, "feat\t{f}\t{}\t{:?}", tag.as_str(), w[k]);
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "featcrf\t1")) => {}
            _ => return Err(Error::parse(1, "expected header \"featcrf\\t1\"")),
        }
        let mut model = FeatCrfModel::zeros(1.0);
        let num = |s: &str, line: usize| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::parse(line, format!("bad number {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(line, "non-finite weight"))
            }
        };
        let tag = |s: &str, line: usize| -> Result<usize> {
            s.parse::<BlockTag>().map(BlockTag::index).map_err(|_| Error::parse(line, format!("bad tag {s:?}")))
        };
        for (i, line) in lines {
            let n = i + 1;
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                ["l2", v] => model.l2 = num(v, n)?,
                ["trans", a, b, v] => model.transitions[tag(a, n)?][tag(b, n)?] = num(v, n)?,
                ["feat", f, t, v] => model.weights.entry(f.to_string()).or_insert([0.0; TAGS])[tag(t, n)?] = num(v, n)?,
                [""] => {}
                _ => return Err(Error::parse(n, format!("unrecognised line {line:?}"))),
            }
        }
        Ok(model)
    }
}

/// Index-based training problem: minimise `-LL(w) + l2/2 ‖w‖²`.
struct Problem {
    sequences: Vec<(Vec<Vec<usize>>, Vec<usize>)>,
    n_features: usize,
    l2: f64,
}

impl Problem {
    fn dim(&self) -> usize {
        self.n_features * TAGS + TAGS * TAGS
    }

    fn transitions(&self, w: &[f64]) -> Transitions {
        let off = self.n_features * TAGS;
        Transitions {
            scores: Tensor::new(vec![TAGS, TAGS], w[off..off + TAGS * TAGS].to_vec()).expect("3x3"),
            start: Tensor::zeros(&[TAGS]),
            end: Tensor::zeros(&[TAGS]),
        }
    }

    fn value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let off = self.n_features * TAGS;
        let tr = self.transitions(w);
        let mut value = 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = w.iter().map(|x| self.l2 * x).collect();
        for (feats, gold) in &self.sequences {
            let n = feats.len();
            let em = Tensor::from_fn(&[n, TAGS], |i| feats[i / TAGS].iter().map(|&f| w[f * TAGS + i % TAGS]).sum());
            let mask = vec![true; n];
            let m = crf::marginals(&em, &tr, &mask)?;
            value += m.log_z - crf::path_score(&em, &tr, gold, &mask)?;
            for t in 0..n {
                for &f in &feats[t] {
                    for k in 0..TAGS {
                        grad[f * TAGS + k] += m.unary.at(t, k);
                    }
                    grad[f * TAGS + gold[t]] -= 1.0;
                }
            }
            for (g, p) in grad[off..].iter_mut().zip(m.pairwise.data()) {
                *g += p;
            }
            for pair in gold.windows(2) {
                grad[off + pair[0] * TAGS + pair[1]] -= 1.0;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("feature CRF objective".into()));
        }
        Ok((value, grad))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const MAX_ITERATIONS: usize = 500;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Limited-memory BFGS with Armijo backtracking. Returns the minimiser and the
/// objective values of accepted iterates.
///
/// Near the optimum the possible decrease falls below the rounding noise of
/// `f`; there a step is accepted when `f` stays within that noise and the
/// gradient norm shrinks. A failed search drops the curvature memory once and
/// retries along the gradient before giving up.
fn lbfgs(problem: &Problem, mut x: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>, usize, f64, bool)> {
    const MEMORY: usize = 10;
    let (mut f, mut g) = problem.value_grad(&x)?;
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        if norm(&g) < GRAD_TOLERANCE {
            return Ok((x, history, iterations, norm(&g), true));
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm(&g).max(1.0),
        };
        for qi in &mut q {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            pairs.clear();
            dir = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = problem.value_grad(&cand)?;
            // within rounding noise of f, progress is judged by the gradient
            let flat = (fc - f).abs() <= 1e-12 * f.abs().max(1.0) && norm(&gc) < norm(&g);
            if (fc < f && fc <= f + 1e-4 * step * slope) || flat {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if pairs.is_empty() {
                // not even steepest descent decreases f at machine precision
                return Ok((x, history, iterations, norm(&g), false));
            }
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if pairs.len() == MEMORY {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
    }
    let gn = norm(&g);
    Ok((x, history, iterations, gn, gn < GRAD_TOLERANCE))
}

/// Fits weights for every feature seen in `data`. The objective is convex,
/// so the result does not depend on a seed.
pub fn train_featcrf(data: &[(Vec<FeatureVector>, Vec<BlockTag>)], l2: f64) -> Result<(FeatCrfModel, FeatCrfReport)> {
    if data.is_empty() || data.iter().all(|(f, _)| f.is_empty()) {
        return Err(Error::Empty("feature CRF training set"));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Config(format!("l2 {l2} must be a non-negative number")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut names: Vec<&str> = Vec::new();
    let mut sequences = Vec::with_capacity(data.len());
    for (fs, gold) in data {
        if fs.len() != gold.len() {
            return Err(Error::Length { what: "feature vectors vs gold tags", left: fs.len(), right: gold.len() });
        }
        if fs.is_empty() {
            continue;
        }
        let ids = fs
            .iter()
            .map(|fv| {
                fv.iter()
                    .map(|f| {
                        *index.entry(f.as_str()).or_insert_with(|| {
                            names.push(f.as_str());
                            names.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        sequences.push((ids, gold.iter().map(|t| t.index()).collect()));
    }
    let problem = Problem { sequences, n_features: names.len(), l2 };
    let (w, history, iterations, grad_norm, converged) = lbfgs(&problem, vec![0.0; problem.dim()])?;

    let mut model = FeatCrfModel::zeros(l2);
    for (i, name) in names.iter().enumerate() {
        let ws = [w[i * TAGS], w[i * TAGS + 1], w[i * TAGS + 2]];
        if ws.iter().any(|&v| v != 0.0) {
            model.weights.insert(name.to_string(), ws);
        }
    }
    let off = problem.n_features * TAGS;
    for i in 0..TAGS {
        for j in 0..TAGS {
            model.transitions[i][j] = w[off + i * TAGS + j];
        }
    }
    let report = FeatCrfReport {
        objective: history.into_iter().map(|v| -v).collect(),
        iterations,
        grad_norm,
        converged,
    };
    Ok((model, report))
}

/// Viterbi path; ties go to the lower tag (B < I < O).
pub fn decode_featcrf(features: &[FeatureVector], model: &FeatCrfModel) -> Vec<BlockTag> {
    if features.is_empty() {
        return Vec::new();
    }
    let em = model.emissions(features);
    crf::viterbi(&em, &model.crf_transitions(), &vec![true; features.len()])
        .expect("emission shape matches the fixed tag set")
        .into_iter()
        .map(BlockTag::from_index)
        .collect()
}
