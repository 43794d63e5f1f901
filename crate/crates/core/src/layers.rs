//! Building blocks shared by the word-level encoder and the clause tagger.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{Tape, Tensor, Var};

/// Standard LSTM cell. Gate blocks along the last axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    /// `[input, 4·hidden]`
    pub w_input: Tensor,
    /// `[hidden, 4·hidden]`
    pub w_hidden: Tensor,
    /// `[4·hidden]`
    pub bias: Tensor,
}

impl LstmCell {
    /// Weights uniform in `[-0.05, 0.05]`, forget-gate bias 1, other biases 0.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_input: uniform(&[input, 4 * hidden], 0.05, rng),
            w_hidden: uniform(&[hidden, 4 * hidden], 0.05, rng),
            bias,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmVars {
    pub fn from_slice(vars: &[Var], hidden: usize) -> Self {
        LstmVars {
            w_input: vars[0],
            w_hidden: vars[1],
            bias: vars[2],
            hidden,
        }
    }

    /// One recurrence step for a batch of rows. `x_proj` is the input already
    /// multiplied by `w_input` (`[rows, 4·hidden]`).
    pub fn step(&self, tape: &mut Tape, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let rec = tape.matmul(h, self.w_hidden)?;
        let pre = tape.add(x_proj, rec)?;
        let gates = tape.add(pre, self.bias)?;
        let i = tape.slice_cols(gates, 0, n)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, n, 2 * n)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * n, 3 * n)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * n, 4 * n)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Runs over `x` (`[steps, input]`) in the given step order with a batch of
    /// one, returning hidden states indexed by step.
    pub fn run_sequence(&self, tape: &mut Tape, x: Var, order: impl Iterator<Item = usize>) -> Result<Vec<Option<Var>>> {
        let steps = tape.shape(x)[0];
        let x_proj = tape.matmul(x, self.w_input)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut out = vec![None; steps];
        for t in order {
            let xt = tape.select_rows(x_proj, vec![t])?;
            (h, c) = self.step(tape, xt, h, c)?;
            out[t] = Some(h);
        }
        Ok(out)
    }
}

/// Keeps `next` where `mask` is set and `prev` elsewhere, row by row.
pub(crate) fn gate_rows(tape: &mut Tape, mask: &[bool], next: Var, prev: Var) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(next);
    }
    let width = tape.shape(next)[1];
    let on = Tensor::from_fn(&[mask.len(), width], |i| f64::from(u8::from(mask[i / width])));
    let off = Tensor::from_fn(&[mask.len(), width], |i| f64::from(u8::from(!mask[i / width])));
    let on = tape.constant(on);
    let off = tape.constant(off);
    let a = tape.mul(next, on)?;
    let b = tape.mul(prev, off)?;
    tape.add(a, b)
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask(shape: &[usize], rate: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

pub(crate) fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(tape.shape(x), rate, rng);
            let mask = tape.constant(mask);
            tape.mul(x, mask)
        }
        _ => Ok(x),
    }
}

/// Shorter-lived copy of an optional RNG handle.
pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut dyn rand::RngCore>) -> Option<&'a mut dyn rand::RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..=limit))
}

/// Glorot/Xavier uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], limit, rng)
}
