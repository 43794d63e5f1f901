//! Minimal dense tensors with reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};

/// `max(v) + ln Σ exp(v_i − max(v))`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp of an empty vector"));
    }
    Ok(tape::lse(v.iter().copied()))
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let z = logsumexp(v)?;
    Ok(v.iter().map(|x| (x - z).exp()).collect())
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar built by `f`, over every coordinate of `params`.
///
/// The relative error of one coordinate is
/// `|analytic − numeric| / max(floor, |analytic| + |numeric|)`. The floor is
/// the larger of `1e-8` and `1e4` times the rounding noise of the difference
/// quotient (4 ulps of the objective over `2·eps`): below it a 1e-4 relative
/// agreement cannot be resolved in double precision.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective evaluated to {v}")))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    let noise = 4.0 * f64::EPSILON * f0.abs().max(1.0) / (2.0 * eps);
    let floor = (1e4 * noise).max(1e-8);
    let mut grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (k, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.take_or_zeros(*var, p);
        for i in 0..p.len() {
            let base = p.data()[i];
            probe[k].data_mut()[i] = base + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = base - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
