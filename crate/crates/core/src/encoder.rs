//! Word-to-clause encoder: projection, LSTM-scored attention over the tokens
//! of each clause, and attention-weighted summarisation of the embeddings.

use std::fmt::Write as _;

use rand::Rng;

use crate::embeddings::ClauseEmbedding;
use crate::error::{Error, Result};
use crate::layers::{dropout, gate_rows, reborrow, glorot, uniform, LstmCell, LstmVars};
use crate::numeric::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `P`, `[d, p]`
    pub projection: Tensor,
    pub attn_lstm: LstmCell,
    /// `s`, `[h]`
    pub score: Tensor,
}

impl EncoderParams {
    pub fn init(d: usize, p: usize, h: usize, rng: &mut impl Rng) -> Self {
        EncoderParams {
            projection: glorot(d, p, rng),
            attn_lstm: LstmCell::init(p, h, rng),
            score: uniform(&[h], 0.05, rng),
        }
    }

    pub fn zeros(d: usize, p: usize, h: usize) -> Self {
        EncoderParams {
            projection: Tensor::zeros(&[d, p]),
            attn_lstm: LstmCell {
                w_input: Tensor::zeros(&[p, 4 * h]),
                w_hidden: Tensor::zeros(&[h, 4 * h]),
                bias: Tensor::zeros(&[4 * h]),
            },
            score: Tensor::zeros(&[h]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn projected_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.score.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let [wi, wh, b] = self.attn_lstm.tensors();
        vec![
            ("encoder.projection", &self.projection),
            ("encoder.attn_lstm.w_input", wi),
            ("encoder.attn_lstm.w_hidden", wh),
            ("encoder.attn_lstm.bias", b),
            ("encoder.score", &self.score),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [wi, wh, b] = self.attn_lstm.tensors_mut();
        vec![&mut self.projection, wi, wh, b, &mut self.score]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, p, h) = (self.input_dim(), self.projected_dim(), self.hidden_dim());
        let lstm = &self.attn_lstm;
        let ok = self.projection.rank() == 2
            && self.score.rank() == 1
            && lstm.w_input.shape() == [p, 4 * h]
            && lstm.w_hidden.shape() == [h, 4 * h]
            && lstm.bias.shape() == [4 * h];
        if !ok {
            return Err(Error::Shape(format!("inconsistent encoder parameters for d={d}, p={p}, h={h}")));
        }
        if !self.tensors().iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }
}

/// Token embeddings of one paragraph (or window), padded to a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedParagraph {
    embeddings: Tensor,
    token_mask: Vec<bool>,
    clause_mask: Vec<bool>,
    tokens: Vec<Vec<String>>,
}

impl EmbeddedParagraph {
    /// `embeddings` is `[c, w, d]`, `token_mask` has `c·w` entries and
    /// `tokens[i]` lists the real tokens of clause `i` (one per set mask entry).
    pub fn new(embeddings: Tensor, token_mask: Vec<bool>, tokens: Vec<Vec<String>>) -> Result<Self> {
        if embeddings.rank() != 3 {
            return Err(Error::Shape(format!("embeddings must be c×w×d, got {:?}", embeddings.shape())));
        }
        let [c, w, d] = [embeddings.shape()[0], embeddings.shape()[1], embeddings.shape()[2]];
        if c == 0 || w == 0 {
            return Err(Error::Empty("paragraph with no clauses or tokens"));
        }
        if token_mask.len() != c * w {
            return Err(Error::Length { what: "token mask vs c·w", left: token_mask.len(), right: c * w });
        }
        if tokens.len() != c {
            return Err(Error::Length { what: "token lists vs clauses", left: tokens.len(), right: c });
        }
        for (i, toks) in tokens.iter().enumerate() {
            let live = token_mask[i * w..(i + 1) * w].iter().filter(|&&m| m).count();
            if live != toks.len() {
                return Err(Error::Length { what: "clause tokens vs mask", left: toks.len(), right: live });
            }
        }
        for (pos, &m) in token_mask.iter().enumerate() {
            if !m && embeddings.data()[pos * d..(pos + 1) * d].iter().any(|&v| v != 0.0) {
                return Err(Error::Shape(format!("masked position {pos} has a non-zero embedding")));
            }
        }
        if !embeddings.all_finite() {
            return Err(Error::NonFinite("token embeddings".into()));
        }
        let clause_mask = (0..c).map(|i| token_mask[i * w..(i + 1) * w].iter().any(|&m| m)).collect();
        Ok(EmbeddedParagraph { embeddings, token_mask, clause_mask, tokens })
    }

    /// Left-aligns each clause's vectors, truncating to `max_tokens`.
    pub fn from_clauses(clauses: &[ClauseEmbedding], dim: usize, max_tokens: usize) -> Result<Self> {
        if clauses.is_empty() {
            return Err(Error::Empty("paragraph with no clauses"));
        }
        let w = clauses.iter().map(|c| c.tokens.len().min(max_tokens)).max().unwrap_or(0).max(1);
        let c = clauses.len();
        let mut data = vec![0.0; c * w * dim];
        let mut mask = vec![false; c * w];
        let mut tokens = Vec::with_capacity(c);
        for (i, clause) in clauses.iter().enumerate() {
            if clause.vectors.len() != clause.tokens.len() * dim {
                return Err(Error::Length {
                    what: "clause vector values vs tokens·dim",
                    left: clause.vectors.len(),
                    right: clause.tokens.len() * dim,
                });
            }
            let n = clause.tokens.len().min(max_tokens);
            for j in 0..n {
                mask[i * w + j] = true;
                let dst = &mut data[(i * w + j) * dim..(i * w + j + 1) * dim];
                for (d, s) in dst.iter_mut().zip(&clause.vectors[j * dim..(j + 1) * dim]) {
                    *d = f64::from(*s);
                }
            }
            tokens.push(clause.tokens[..n].to_vec());
        }
        Self::new(Tensor::new(vec![c, w, dim], data)?, mask, tokens)
    }

    pub fn clauses(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn token_mask(&self) -> &[bool] {
        &self.token_mask
    }

    pub fn clause_mask(&self) -> &[bool] {
        &self.clause_mask
    }

    pub fn tokens(&self) -> &[Vec<String>] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderVars {
    pub projection: Var,
    pub lstm: LstmVars,
    pub score: Var,
}

impl EncoderVars {
    /// Expects the order of [`EncoderParams::tensors`].
    pub fn from_slice(vars: &[Var], hidden: usize) -> Self {
        EncoderVars {
            projection: vars[0],
            lstm: LstmVars::from_slice(&vars[1..4], hidden),
            score: vars[4],
        }
    }
}

pub(crate) struct Encoded {
    /// `[c, w]`
    pub attention: Var,
    /// `[c, d]`
    pub summary: Var,
}

pub(crate) struct EncoderDropout<'a> {
    pub rng: Option<&'a mut dyn rand::RngCore>,
    pub embedding: f64,
    pub attention: f64,
}

impl EncoderDropout<'_> {
    pub fn off() -> Self {
        EncoderDropout { rng: None, embedding: 0.0, attention: 0.0 }
    }
}

pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    ep: &EmbeddedParagraph,
    mut drop: EncoderDropout<'_>,
) -> Result<Encoded> {
    let (c, w, d) = (ep.clauses(), ep.width(), ep.dim());
    let p_shape = tape.shape(vars.projection).to_vec();
    if p_shape[0] != d {
        return Err(Error::Shape(format!("embedding dim {d} but projection is {p_shape:?}")));
    }
    let mut emb = ep.embeddings.clone();
    if let Some(rng) = reborrow(&mut drop.rng) {
        if drop.embedding > 0.0 {
            let mask = crate::layers::dropout_mask(emb.shape(), drop.embedding, rng);
            for (v, m) in emb.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
    }
    let flat = tape.constant(emb.clone().reshaped(&[c * w, d])?);
    let cube = tape.constant(emb);

    let lin = tape.matmul(flat, vars.projection)?;
    let projected = tape.tanh(lin);
    let x_proj = tape.matmul(projected, vars.lstm.w_input)?;
    let hidden = vars.lstm.hidden;
    let s_col = tape.reshape(vars.score, &[hidden, 1])?;

    let mut h = tape.constant(Tensor::zeros(&[c, hidden]));
    let mut cell = tape.constant(Tensor::zeros(&[c, hidden]));
    let mut columns = Vec::with_capacity(w);
    for j in 0..w {
        let step_mask: Vec<bool> = (0..c).map(|i| ep.token_mask[i * w + j]).collect();
        if !step_mask.iter().any(|&m| m) {
            columns.push(tape.constant(Tensor::zeros(&[c, 1])));
            continue;
        }
        let xj = tape.select_rows(x_proj, (0..c).map(|i| i * w + j).collect())?;
        let (h_next, c_next) = vars.lstm.step(tape, xj, h, cell)?;
        h = gate_rows(tape, &step_mask, h_next, h)?;
        cell = gate_rows(tape, &step_mask, c_next, cell)?;
        columns.push(tape.matmul(h, s_col)?);
    }
    let scores = tape.concat(&columns, 1)?;
    let attention = tape.softmax(scores, Some(ep.token_mask.clone()))?;
    let weights = dropout(tape, attention, drop.attention, reborrow(&mut drop.rng))?;
    let weights = tape.reshape(weights, &[c, 1, w])?;
    let summary = tape.matmul(weights, cube)?;
    let summary = tape.reshape(summary, &[c, d])?;
    Ok(Encoded { attention, summary })
}

fn bind(tape: &mut Tape, params: &EncoderParams) -> EncoderVars {
    let vars: Vec<Var> = params.tensors().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
    EncoderVars::from_slice(&vars, params.hidden_dim())
}

/// `tanh(D·P)` per token, `[c, w, p]`.
pub fn project(ep: &EmbeddedParagraph, params: &EncoderParams) -> Result<Tensor> {
    if ep.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs projection rows {}",
            ep.dim(),
            params.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let flat = tape.constant(ep.embeddings.clone().reshaped(&[ep.clauses() * ep.width(), ep.dim()])?);
    let p = tape.constant(params.projection.clone());
    let lin = tape.matmul(flat, p)?;
    let out = tape.tanh(lin);
    tape.value(out).clone().reshaped(&[ep.clauses(), ep.width(), params.projected_dim()])
}

/// Attention weights of one projected clause (`[w, p]`).
pub fn attend(projected_clause: &Tensor, mask: &[bool], params: &EncoderParams) -> Result<Vec<f64>> {
    if projected_clause.rank() != 2 || projected_clause.cols() != params.projected_dim() {
        return Err(Error::Shape(format!(
            "projected clause {:?} for p={}",
            projected_clause.shape(),
            params.projected_dim()
        )));
    }
    let w = projected_clause.rows();
    if mask.len() != w {
        return Err(Error::Length { what: "mask vs clause width", left: mask.len(), right: w });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("attention over a clause with no tokens"));
    }
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let x = tape.constant(projected_clause.clone());
    let x_proj = tape.matmul(x, vars.lstm.w_input)?;
    let s_col = tape.reshape(vars.score, &[params.hidden_dim(), 1])?;
    let mut h = tape.constant(Tensor::zeros(&[1, params.hidden_dim()]));
    let mut cell = h;
    let mut scores = Vec::with_capacity(w);
    for (j, &live) in mask.iter().enumerate() {
        if !live {
            scores.push(tape.constant(Tensor::zeros(&[1, 1])));
            continue;
        }
        let xj = tape.select_rows(x_proj, vec![j])?;
        (h, cell) = vars.lstm.step(&mut tape, xj, h, cell)?;
        scores.push(tape.matmul(h, s_col)?);
    }
    let row = tape.concat(&scores, 1)?;
    let a = tape.softmax(row, Some(mask.to_vec()))?;
    Ok(tape.value(a).data().to_vec())
}

/// `D_summ[i] = A[i]·D[i]`, `[c, d]`.
pub fn summarize(ep: &EmbeddedParagraph, attention: &Tensor) -> Result<Tensor> {
    let (c, w, d) = (ep.clauses(), ep.width(), ep.dim());
    if attention.shape() != [c, w] {
        return Err(Error::Shape(format!("attention {:?} for a {c}×{w} paragraph", attention.shape())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(attention.clone().reshaped(&[c, 1, w])?);
    let cube = tape.constant(ep.embeddings.clone());
    let s = tape.matmul(a, cube)?;
    tape.value(s).clone().reshaped(&[c, d])
}

/// Attention matrix `[c, w]` of a whole paragraph (inference mode).
pub fn attention_matrix(ep: &EmbeddedParagraph, params: &EncoderParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let enc = encode_on_tape(&mut tape, &vars, ep, EncoderDropout::off())?;
    Ok(tape.value(enc.attention).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub clause: usize,
    pub token: String,
    pub weight: f64,
}

/// One row per real token; `clause_offset` is added to clause indices.
pub fn attention_rows(ep: &EmbeddedParagraph, params: &EncoderParams, clause_offset: usize) -> Result<Vec<AttentionRow>> {
    let a = attention_matrix(ep, params)?;
    let w = ep.width();
    let mut rows = Vec::new();
    for (i, toks) in ep.tokens.iter().enumerate() {
        let live = (0..w).filter(|&j| ep.token_mask[i * w + j]);
        for (tok, j) in toks.iter().zip(live) {
            rows.push(AttentionRow { clause: clause_offset + i, token: tok.clone(), weight: a.at(i, j) });
        }
    }
    Ok(rows)
}

pub fn report_tsv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("clause_index\ttoken\tweight\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.clause, r.token.replace(['\t', '\n'], " "), r.weight);
    }
    out
}

/// Heat map with one line per clause; cell shading tracks the weight.
pub fn report_html(rows: &[AttentionRow], labels: Option<&[String]>) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attention</title>\n\
         <style>body{font-family:sans-serif}span.t{padding:1px 2px;margin:1px;display:inline-block}\
         td.l{color:#555;padding-right:1em}</style></head><body><table>\n",
    );
    let mut i = 0;
    while i < rows.len() {
        let clause = rows[i].clause;
        let label = labels.and_then(|l| l.get(clause)).map(String::as_str).unwrap_or("");
        let _ = write!(out, "<tr><td class=\"l\">{clause}</td><td class=\"l\">{}</td><td>", escape(label));
        while i < rows.len() && rows[i].clause == clause {
            let r = &rows[i];
            let alpha = r.weight.clamp(0.0, 1.0);
            let _ = write!(
                out,
                "<span class=\"t\" title=\"{:.4}\" style=\"background:rgba(220,40,40,{alpha:.3})\">{}</span>",
                r.weight,
                escape(&r.token)
            );
            i += 1;
        }
        out.push_str("</td></tr>\n");
    }
    out.push_str("</table></body></html>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, p: usize, h: usize, scale: f64, rng: &mut ChaCha8Rng) -> EncoderParams {
        let mut params = EncoderParams::init(d, p, h, rng);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        params
    }

    fn random_paragraph(lens: &[usize], d: usize, rng: &mut ChaCha8Rng) -> EmbeddedParagraph {
        let clauses: Vec<ClauseEmbedding> = lens
            .iter()
            .map(|&n| ClauseEmbedding {
                tokens: (0..n).map(|j| format!("t{j}")).collect(),
                vectors: (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            })
            .collect();
        EmbeddedParagraph::from_clauses(&clauses, d, 60).unwrap()
    }

    #[test]
    fn paragraph_validation() {
        let t = Tensor::zeros(&[1, 2, 3]);
        assert!(EmbeddedParagraph::new(t.clone(), vec![true, false], vec![vec!["a".into()]]).is_ok());
        assert!(EmbeddedParagraph::new(t.clone(), vec![true], vec![vec!["a".into()]]).is_err());
        assert!(EmbeddedParagraph::new(t.clone(), vec![true, true], vec![vec!["a".into()]]).is_err());
        let mut bad = t;
        bad.data_mut()[5] = 1.0;
        assert!(EmbeddedParagraph::new(bad, vec![true, false], vec![vec!["a".into()]]).is_err());
    }

    #[test]
    fn from_clauses_pads_and_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = random_paragraph(&[3, 1, 0], 2, &mut rng);
        assert_eq!((ep.clauses(), ep.width(), ep.dim()), (3, 3, 2));
        assert_eq!(ep.clause_mask(), &[true, true, false]);
        assert_eq!(ep.token_mask(), &[true, true, true, true, false, false, false, false, false]);
        let clause = ClauseEmbedding { tokens: vec!["a".into(), "b".into()], vectors: vec![1.0; 4] };
        let ep = EmbeddedParagraph::from_clauses(&[clause], 2, 1).unwrap();
        assert_eq!(ep.width(), 1);
        assert_eq!(ep.tokens()[0], vec!["a".to_string()]);
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = random_paragraph(&[2, 3], 4, &mut rng);
        let params = EncoderParams::zeros(4, 3, 2);
        let out = project(&ep, &params).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_is_tanh() {
        let clause = ClauseEmbedding { tokens: vec!["x".into()], vectors: vec![0.1, -0.2, 0.3] };
        let ep = EmbeddedParagraph::from_clauses(&[clause], 3, 60).unwrap();
        let mut params = EncoderParams::zeros(3, 3, 2);
        for i in 0..3 {
            params.projection.data_mut()[i * 3 + i] = 1.0;
        }
        let out = project(&ep, &params).unwrap();
        for (o, x) in out.data().iter().zip([0.1f32, -0.2, 0.3]) {
            assert!((o - f64::from(x).tanh()).abs() < 1e-15);
        }
        assert!(project(&ep, &EncoderParams::zeros(4, 3, 2)).is_err());
    }

    #[test]
    fn projection_shape_at_full_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lens = vec![60; 40];
        let ep = random_paragraph(&lens, 768, &mut rng);
        let params = EncoderParams::init(768, 200, 75, &mut rng);
        assert_eq!(project(&ep, &params).unwrap().shape(), &[40, 60, 200]);
    }

    #[test]
    fn zero_score_vector_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = random_params(4, 3, 5, 0.5, &mut rng);
        params.score = Tensor::zeros(&[5]);
        let x = Tensor::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
        let mask = [true, false, true, true, false];
        let a = attend(&x, &mask, &params).unwrap();
        for (j, &m) in mask.iter().enumerate() {
            assert_eq!(a[j], if m { 1.0 / 3.0 } else { 0.0 });
        }
        assert_eq!(attend(&x.clone().reshaped(&[5, 3]).unwrap(), &[true, false, false, false, false], &params).unwrap()[0], 1.0);
        assert!(attend(&x, &[false; 5], &params).is_err());
    }

    // Scalar reimplementation of the recurrence used as an oracle.
    fn reference_attention(x: &Tensor, mask: &[bool], params: &EncoderParams) -> Vec<f64> {
        let h = params.hidden_dim();
        let p = params.projected_dim();
        let l = &params.attn_lstm;
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut scores = vec![f64::NEG_INFINITY; mask.len()];
        for (j, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let mut z = vec![0.0; 4 * h];
            for (g, zg) in z.iter_mut().enumerate() {
                let mut acc = l.bias.data()[g];
                for k in 0..p {
                    acc += x.at(j, k) * l.w_input.at(k, g);
                }
                for k in 0..h {
                    acc += hs[k] * l.w_hidden.at(k, g);
                }
                *zg = acc;
            }
            for u in 0..h {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[h + u]);
                let g = z[2 * h + u].tanh();
                let o = sigmoid(z[3 * h + u]);
                cs[u] = f * cs[u] + i * g;
                hs[u] = o * cs[u].tanh();
            }
            scores[j] = hs.iter().zip(params.score.data()).map(|(a, b)| a * b).sum();
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    #[test]
    fn attention_matches_hand_unrolled_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let params = random_params(6, 5, 4, 0.8, &mut rng);
            let x = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
            let mask = if trial % 2 == 0 { vec![true; 4] } else { vec![true, true, false, true] };
            let got = attend(&x, &mask, &params).unwrap();
            let want = reference_attention(&x, &mask, &params);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn batched_attention_matches_per_clause() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(4, 3, 5, 0.7, &mut rng);
        let ep = random_paragraph(&[3, 1, 4, 2], 4, &mut rng);
        let a = attention_matrix(&ep, &params).unwrap();
        let projected = project(&ep, &params).unwrap();
        let (w, p) = (ep.width(), 3);
        for i in 0..ep.clauses() {
            let clause = Tensor::new(vec![w, p], projected.data()[i * w * p..(i + 1) * w * p].to_vec()).unwrap();
            let single = attend(&clause, &ep.token_mask()[i * w..(i + 1) * w], &params).unwrap();
            for j in 0..w {
                assert!((a.at(i, j) - single[j]).abs() < 1e-14);
            }
            let sum: f64 = a.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn summarize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ep = random_paragraph(&[3, 2], 4, &mut rng);
        let mut a = Tensor::zeros(&[2, 3]);
        a.data_mut()[1] = 1.0;
        a.data_mut()[3] = 0.25;
        a.data_mut()[4] = 0.75;
        let s = summarize(&ep, &a).unwrap();
        let d = ep.embeddings().data();
        for k in 0..4 {
            assert_eq!(s.at(0, k), d[4 + k]);
            // naive double loop
            let mut acc = 0.0;
            for j in 0..3 {
                acc += a.at(1, j) * d[(3 + j) * 4 + k];
            }
            assert!((s.at(1, k) - acc).abs() < 1e-15);
        }
        assert!(summarize(&ep, &Tensor::zeros(&[2, 2])).is_err());

        let v = vec![0.5f32, -1.0];
        let clause = ClauseEmbedding { tokens: vec!["a".into(), "b".into()], vectors: [v.clone(), v].concat() };
        let ep = EmbeddedParagraph::from_clauses(&[clause], 2, 60).unwrap();
        let s = summarize(&ep, &Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, -1.0]);
    }

    #[test]
    fn padding_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_params(4, 3, 5, 0.7, &mut rng);
        let ep = random_paragraph(&[3, 2], 4, &mut rng);
        let (c, w, d) = (2, 3, 4);
        let extra = 4;
        let wide = w + extra;
        let mut data = vec![0.0; c * wide * d];
        let mut mask = vec![false; c * wide];
        for i in 0..c {
            for j in 0..w {
                mask[i * wide + j] = ep.token_mask()[i * w + j];
                for k in 0..d {
                    data[(i * wide + j) * d + k] = ep.embeddings().data()[(i * w + j) * d + k];
                }
            }
        }
        let padded = EmbeddedParagraph::new(Tensor::new(vec![c, wide, d], data).unwrap(), mask, ep.tokens().to_vec()).unwrap();

        let run = |ep: &EmbeddedParagraph| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &params);
            let enc = encode_on_tape(&mut tape, &vars, ep, EncoderDropout::off()).unwrap();
            (tape.value(enc.attention).clone(), tape.value(enc.summary).clone())
        };
        let (a1, s1) = run(&ep);
        let (a2, s2) = run(&padded);
        for i in 0..c {
            for j in 0..w {
                assert_eq!(a1.at(i, j).to_bits(), a2.at(i, j).to_bits());
            }
            for j in w..wide {
                assert_eq!(a2.at(i, j), 0.0);
            }
        }
        assert!(s1.data().iter().zip(s2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn empty_clause_summarizes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(4, 3, 5, 0.7, &mut rng);
        let ep = random_paragraph(&[2, 0, 3], 4, &mut rng);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &params);
        let enc = encode_on_tape(&mut tape, &vars, &ep, EncoderDropout::off()).unwrap();
        let s = tape.value(enc.summary);
        assert!(s.row(1).iter().all(|&v| v == 0.0));
        assert!(tape.value(enc.attention).row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(4, 3, 3, 0.6, &mut rng);
        let ep = random_paragraph(&[3, 1, 2], 4, &mut rng);
        let weights = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let tensors: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let err = grad_check(
            |tape, v| {
                let vars = EncoderVars::from_slice(v, 3);
                let enc = encode_on_tape(tape, &vars, &ep, EncoderDropout::off())?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(enc.summary, w)?;
                Ok(tape.sum(prod))
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn report_rows_and_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = random_params(4, 3, 5, 0.7, &mut rng);
        let ep = random_paragraph(&[1, 3], 4, &mut rng);
        let rows = attention_rows(&ep, &params, 5).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].clause, 5);
        assert_eq!(rows[0].weight, 1.0);
        let sum: f64 = rows[1..].iter().map(|r| r.weight).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let tsv = report_tsv(&rows);
        assert!(tsv.starts_with("clause_index\ttoken\tweight\n"));
        assert_eq!(tsv.lines().count(), 5);
        let html = report_html(&rows, None);
        assert_eq!(html.matches("<tr>").count(), 2);
    }
}
