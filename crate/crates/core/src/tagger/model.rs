use std::ops::Range;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::crf::{self, Transitions};
use super::TaggerConfig;
use crate::corpus::{decode_bio, BioTag, LabelSet, Paragraph};
use crate::embeddings::EmbeddingStore;
use crate::encoder::{attention_rows, encode_on_tape, AttentionRow, EmbeddedParagraph, EncoderDropout, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::layers::{dropout, glorot, reborrow, LstmCell, LstmVars};
use crate::numeric::{Tape, Tensor, Var};

/// Hierarchical clause tagger: token attention pooling, a dense layer, a
/// clause-level BiLSTM and a CRF over BIO tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub label_set: LabelSet,
    pub encoder: EncoderParams,
    /// `[d, d2]`
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
    pub forward_lstm: LstmCell,
    pub backward_lstm: LstmCell,
    /// `[2·hidden, K]`
    pub emission_weight: Tensor,
    pub emission_bias: Tensor,
    pub transitions: Transitions,
}

/// Names of the parameter tensors, in the order used everywhere else.
pub const PARAM_NAMES: [&str; 18] = [
    "encoder.projection",
    "encoder.attn_lstm.w_input",
    "encoder.attn_lstm.w_hidden",
    "encoder.attn_lstm.bias",
    "encoder.score",
    "dense.weight",
    "dense.bias",
    "bilstm.forward.w_input",
    "bilstm.forward.w_hidden",
    "bilstm.forward.bias",
    "bilstm.backward.w_input",
    "bilstm.backward.w_hidden",
    "bilstm.backward.bias",
    "emission.weight",
    "emission.bias",
    "crf.transitions",
    "crf.start",
    "crf.end",
];

impl TaggerModel {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: TaggerConfig, label_set: LabelSet) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = label_set.bio_size();
        let c = &config;
        Ok(TaggerModel {
            encoder: EncoderParams::init(c.d, c.p, c.h, &mut rng),
            dense_weight: glorot(c.d, c.d2, &mut rng),
            dense_bias: Tensor::zeros(&[c.d2]),
            forward_lstm: LstmCell::init(c.d2, c.hidden, &mut rng),
            backward_lstm: LstmCell::init(c.d2, c.hidden, &mut rng),
            emission_weight: glorot(2 * c.hidden, k, &mut rng),
            emission_bias: Tensor::zeros(&[k]),
            transitions: Transitions::zeros(k),
            label_set,
            config,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.label_set.bio_size()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoder.tensors().into_iter().map(|(_, t)| t).collect();
        out.extend([&self.dense_weight, &self.dense_bias]);
        out.extend(self.forward_lstm.tensors());
        out.extend(self.backward_lstm.tensors());
        out.extend([
            &self.emission_weight,
            &self.emission_bias,
            &self.transitions.scores,
            &self.transitions.start,
            &self.transitions.end,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend([&mut self.dense_weight, &mut self.dense_bias]);
        out.extend(self.forward_lstm.tensors_mut());
        out.extend(self.backward_lstm.tensors_mut());
        out.extend([
            &mut self.emission_weight,
            &mut self.emission_bias,
            &mut self.transitions.scores,
            &mut self.transitions.start,
            &mut self.transitions.end,
        ]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.tensors()).collect()
    }

    /// Expected shape of every parameter for `config` and `k` tags.
    pub fn expected_shapes(config: &TaggerConfig, k: usize) -> Vec<Vec<usize>> {
        let c = config;
        let lstm = |input: usize, h: usize| [vec![input, 4 * h], vec![h, 4 * h], vec![4 * h]];
        let mut out = vec![vec![c.d, c.p]];
        out.extend(lstm(c.p, c.h));
        out.push(vec![c.h]);
        out.extend([vec![c.d, c.d2], vec![c.d2]]);
        out.extend(lstm(c.d2, c.hidden));
        out.extend(lstm(c.d2, c.hidden));
        out.extend([vec![2 * c.hidden, k], vec![k], vec![k, k], vec![k], vec![k]]);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config, self.num_tags());
        for ((name, t), shape) in self.named_tensors().into_iter().zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    /// Emission scores `[c, K]`. Passing an RNG turns on training-mode dropout.
    pub fn forward(&self, ep: &EmbeddedParagraph, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let em = build_emissions(&mut tape, &vars, &self.config, ep, rng)?;
        Ok(tape.value(em).clone())
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ModelVars::from_slice(&vars, &self.config)
    }

    /// BIO tags for every clause of `paragraph`, window by window.
    pub fn tag_bio(&self, paragraph: &Paragraph, store: &EmbeddingStore) -> Result<Vec<BioTag>> {
        let mut out = Vec::with_capacity(paragraph.len());
        for range in windows(paragraph.len(), self.config.c) {
            let ep = store.embed(paragraph, range, self.config.w)?;
            let em = self.forward(&ep, None)?;
            let path = crf::viterbi(&em, &self.transitions, &vec![true; ep.clauses()])?;
            out.extend(path.into_iter().map(|i| self.label_set.bio_tag(i)));
        }
        Ok(out)
    }

    pub fn tag(&self, paragraph: &Paragraph, store: &EmbeddingStore) -> Result<Vec<String>> {
        Ok(decode_bio(&self.tag_bio(paragraph, store)?, &self.label_set))
    }

    /// Copy with fresh emission and transition parameters for `label_set`.
    pub fn swap_head(&self, label_set: LabelSet, seed: u64) -> TaggerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = label_set.bio_size();
        TaggerModel {
            emission_weight: glorot(2 * self.config.hidden, k, &mut rng),
            emission_bias: Tensor::zeros(&[k]),
            transitions: Transitions::zeros(k),
            label_set,
            ..self.clone()
        }
    }

    pub fn attention_report(&self, paragraph: &Paragraph, store: &EmbeddingStore) -> Result<Vec<AttentionRow>> {
        let mut rows = Vec::new();
        for range in windows(paragraph.len(), self.config.c) {
            let offset = range.start;
            let ep = store.embed(paragraph, range, self.config.w)?;
            if ep.dim() != self.config.d {
                return Err(Error::Shape(format!("embedding dim {} vs model d {}", ep.dim(), self.config.d)));
            }
            rows.extend(attention_rows(&ep, &self.encoder, offset)?);
        }
        Ok(rows)
    }
}

/// Consecutive windows of at most `c` clauses covering `0..n`.
pub fn windows(n: usize, c: usize) -> Vec<Range<usize>> {
    let c = c.max(1);
    (0..n).step_by(c).map(|s| s..(s + c).min(n)).collect()
}

pub(crate) struct ModelVars {
    pub encoder: EncoderVars,
    pub dense_weight: Var,
    pub dense_bias: Var,
    pub forward: LstmVars,
    pub backward: LstmVars,
    pub emission_weight: Var,
    pub emission_bias: Var,
    pub transitions: Var,
    pub start: Var,
    pub end: Var,
    pub all: Vec<Var>,
}

impl ModelVars {
    pub fn from_slice(v: &[Var], config: &TaggerConfig) -> Self {
        ModelVars {
            encoder: EncoderVars::from_slice(&v[0..5], config.h),
            dense_weight: v[5],
            dense_bias: v[6],
            forward: LstmVars::from_slice(&v[7..10], config.hidden),
            backward: LstmVars::from_slice(&v[10..13], config.hidden),
            emission_weight: v[13],
            emission_bias: v[14],
            transitions: v[15],
            start: v[16],
            end: v[17],
            all: v.to_vec(),
        }
    }
}

pub(crate) fn build_emissions(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &TaggerConfig,
    ep: &EmbeddedParagraph,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if ep.dim() != config.d {
        return Err(Error::Shape(format!("embedding dim {} vs model d {}", ep.dim(), config.d)));
    }
    let rates = config.dropouts;
    let enc = encode_on_tape(
        tape,
        &vars.encoder,
        ep,
        EncoderDropout { rng: reborrow(&mut rng), embedding: rates.embedding, attention: rates.attention },
    )?;
    let lin = tape.matmul(enc.summary, vars.dense_weight)?;
    let lin = tape.add(lin, vars.dense_bias)?;
    let dense = tape.tanh(lin);
    let dense = dropout(tape, dense, rates.dense, reborrow(&mut rng))?;
    let x = dropout(tape, dense, rates.lstm, reborrow(&mut rng))?;

    let c = ep.clauses();
    let fwd = vars.forward.run_sequence(tape, x, 0..c)?;
    let bwd = vars.backward.run_sequence(tape, x, (0..c).rev())?;
    let fwd: Vec<Var> = fwd.into_iter().map(|v| v.expect("every step visited")).collect();
    let bwd: Vec<Var> = bwd.into_iter().map(|v| v.expect("every step visited")).collect();
    let fwd = tape.concat(&fwd, 0)?;
    let bwd = tape.concat(&bwd, 0)?;
    let states = tape.concat(&[fwd, bwd], 1)?;
    let em = tape.matmul(states, vars.emission_weight)?;
    let mut em = tape.add(em, vars.emission_bias)?;
    if ep.clause_mask().iter().any(|&m| !m) {
        let k = tape.shape(em)[1];
        let mask = Tensor::from_fn(&[c, k], |i| f64::from(u8::from(ep.clause_mask()[i / k])));
        let mask = tape.constant(mask);
        em = tape.mul(em, mask)?;
    }
    Ok(em)
}

/// CRF loss of one window divided by its clause count.
pub(crate) fn window_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &TaggerConfig,
    ep: &EmbeddedParagraph,
    gold: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let em = build_emissions(tape, vars, config, ep, rng)?;
    let nll = crf::nll_on_tape(tape, em, vars.transitions, vars.start, vars.end, gold)?;
    Ok(tape.scale(nll, 1.0 / gold.len() as f64))
}

/// Inference-mode loss of one window (CRF negative log-likelihood divided by
/// the clause count) built from parameter variables given in
/// [`PARAM_NAMES`] order. Meant for gradient checking.
pub fn loss_on_tape(tape: &mut Tape, params: &[Var], config: &TaggerConfig, ep: &EmbeddedParagraph, gold: &[usize]) -> Result<Var> {
    if params.len() != PARAM_NAMES.len() {
        return Err(Error::Length { what: "parameter variables", left: params.len(), right: PARAM_NAMES.len() });
    }
    let vars = ModelVars::from_slice(params, config);
    window_loss(tape, &vars, config, ep, gold, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_bio, Clause};
    use crate::embeddings::synthetic_store;
    use crate::numeric::grad_check;
    use rand::Rng;

    fn toy_config() -> TaggerConfig {
        TaggerConfig { c: 3, w: 4, d: 8, p: 5, h: 4, d2: 6, hidden: 5, ..TaggerConfig::default() }
    }

    fn paragraph(id: &str, labels: &[&str]) -> Paragraph {
        let clauses = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Clause::from_text(&format!("{l} word{i} and more tokens"), Some(l.to_string())))
            .collect();
        Paragraph::new(id, clauses, None).unwrap()
    }

    #[test]
    fn windows_cover_everything() {
        assert_eq!(windows(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(windows(3, 40), vec![0..3]);
        assert!(windows(0, 4).is_empty());
    }

    #[test]
    fn shapes_and_tag_count() {
        let m = TaggerModel::new(toy_config(), LabelSet::scidt()).unwrap();
        assert_eq!(m.num_tags(), 15);
        m.validate().unwrap();
        let p = paragraph("p", &["goal", "method", "result"]);
        let store = synthetic_store(&[p.clone()], 8, 0).unwrap();
        let ep = store.embed(&p, 0..3, 4).unwrap();
        assert_eq!(m.forward(&ep, None).unwrap().shape(), &[3, 15]);
        let claim = m.swap_head(LabelSet::claim(), 1);
        assert_eq!(claim.num_tags(), 3);
        assert_eq!(claim.encoder, m.encoder);
        claim.validate().unwrap();
    }

    #[test]
    fn zero_parameters_emit_the_bias() {
        let mut m = TaggerModel::new(toy_config(), LabelSet::scidt()).unwrap();
        for t in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..15).map(|i| i as f64 * 0.1 - 0.3).collect();
        m.emission_bias = Tensor::vector(bias.clone());
        let p = paragraph("p", &["goal", "fact"]);
        let store = synthetic_store(&[p.clone()], 8, 0).unwrap();
        let em = m.forward(&store.embed(&p, 0..2, 4).unwrap(), None).unwrap();
        for r in 0..2 {
            assert_eq!(em.row(r), bias.as_slice());
        }
    }

    #[test]
    fn tag_output_is_in_label_set() {
        let m = TaggerModel::new(toy_config(), LabelSet::scidt()).unwrap();
        let p = paragraph("p", &["goal", "fact", "none", "method", "result"]);
        let store = synthetic_store(&[p.clone()], 8, 0).unwrap();
        let labels = m.tag(&p, &store).unwrap();
        assert_eq!(labels.len(), 5);
        assert!(labels.iter().all(|l| m.label_set.contains(l)));
        let one = paragraph("q", &["goal"]);
        let store = synthetic_store(&[one.clone()], 8, 0).unwrap();
        assert_eq!(m.tag(&one, &store).unwrap().len(), 1);
    }

    #[test]
    fn dropout_changes_only_training_forward() {
        let m = TaggerModel::new(toy_config(), LabelSet::scidt()).unwrap();
        let p = paragraph("p", &["goal", "fact"]);
        let store = synthetic_store(&[p.clone()], 8, 0).unwrap();
        let ep = store.embed(&p, 0..2, 4).unwrap();
        assert_eq!(m.forward(&ep, None).unwrap(), m.forward(&ep, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_ne!(m.forward(&ep, Some(&mut rng)).unwrap(), m.forward(&ep, None).unwrap());
    }

    #[test]
    fn end_to_end_gradient() {
        let config = toy_config();
        let p = paragraph("p", &["goal", "goal", "result"]);
        let store = synthetic_store(&[p.clone()], 8, 0).unwrap();
        let ep = store.embed(&p, 0..3, 4).unwrap();
        let ls = LabelSet::scidt();
        let gold: Vec<usize> = encode_bio(&p.gold_labels().unwrap(), &ls).unwrap().into_iter().map(|t| ls.bio_index(t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = TaggerModel::new(config.clone(), ls).unwrap();
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let params: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
        let err = grad_check(
            |tape, v| {
                let vars = ModelVars::from_slice(v, &config);
                window_loss(tape, &vars, &config, &ep, &gold, None)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
