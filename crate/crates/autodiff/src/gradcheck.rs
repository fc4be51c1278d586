//! Central finite-difference checks of tape gradients in `f64`.

use crate::error::{shape_err, Result};
use crate::ops::OpKind;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-input relative error `||analytic - numeric||_inf / max(||numeric||_inf, tiny)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_err: Vec<f64>,
    pub max_abs_numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

const TINY: f64 = 1e-12;

fn weighted_loss(
    f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    trainable: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != weights.shape() {
        return Err(shape_err("gradcheck", &[tape.value(out).shape(), weights.shape()], "weights must match output"));
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `sum(f(inputs) * weights)` against central
/// differences with step `eps`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    eps: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (tape, vars, loss) = weighted_loss(&f, inputs, weights, true)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheckReport { rel_err: Vec::new(), max_abs_numeric: Vec::new() };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (t, _, l) = weighted_loss(&f, xs, weights, false)?;
        Ok(t.value(l).item())
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x);
        let mut work = inputs.to_vec();
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for j in 0..x.len() {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * eps);
            max_diff = max_diff.max((analytic.data()[j] - num).abs());
            max_num = max_num.max(num.abs());
        }
        report.rel_err.push(max_diff / max_num.max(TINY));
        report.max_abs_numeric.push(max_num);
    }
    Ok(report)
}

/// [`gradcheck`] for a single op applied directly to the inputs.
pub fn gradcheck_op(kind: &OpKind, inputs: &[Tensor<f64>], weights: &Tensor<f64>, eps: f64) -> Result<GradCheckReport> {
    gradcheck(inputs, weights, eps, |tape, vars| tape.apply(kind.clone(), vars))
}
