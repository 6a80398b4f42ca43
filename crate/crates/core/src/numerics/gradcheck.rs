//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error (see [`relative_error`]) for each input.
    pub relative_errors: Vec<f64>,
    /// Largest elementwise absolute discrepancy over all inputs.
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Gradient norms below this are compared absolutely; an exactly-zero
/// gradient (e.g. a key bias under softmax shift invariance) otherwise turns
/// finite-difference round-off into a relative error of 1.
pub const NORM_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    diff / scale.max(NORM_FLOOR)
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences of step `h`, re-running `f` on a fresh tape per evaluation.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::dim("gradient check output", v.shape(), &[1]));
        }
        Ok(v.data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = inputs.to_vec();
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_error = 0.0_f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        for (a, n) in analytic.data().iter().zip(&numeric) {
            max_abs_error = max_abs_error.max((a - n).abs());
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheckReport {
        relative_errors,
        max_abs_error,
    })
}
