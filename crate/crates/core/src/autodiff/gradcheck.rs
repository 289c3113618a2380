//! Central finite-difference gradient checking.
//!
//! Used by the test suites as an oracle that only evaluates forward values.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are judged by absolute error `≤ 1e-4 · REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every entry of `input`.
pub fn numeric_gradient(
    input: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = input.clone();
    let mut out = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compare the tape gradient of `forward` (which must return a scalar)
/// against central differences with step `h`.
pub fn check_gradient(
    input: &Tensor,
    h: f64,
    forward: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let loss = forward(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .ok_or_else(|| Error::Contract("input is not connected to the loss".into()))?
        .data()
        .to_vec();
    let numeric = numeric_gradient(input, h, |probe| {
        let mut t = Tape::new();
        let x = t.constant(probe.clone());
        let y = forward(&mut t, x)?;
        Ok(t.value(y).item())
    })?;
    Ok(compare(analytic, numeric))
}

pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    let mut worst = (0.0, 0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(*a, *n);
        let abs = (a - n).abs();
        if rel > worst.0 {
            worst.0 = rel;
            worst.2 = i;
        }
        worst.1 = f64::max(worst.1, abs);
    }
    GradCheck {
        max_rel_err: worst.0,
        max_abs_err: worst.1,
        worst_index: worst.2,
        analytic,
        numeric,
    }
}
