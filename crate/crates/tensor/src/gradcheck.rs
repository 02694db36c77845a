//! Finite-difference verification of reverse-mode gradients.

use crate::{Result, Tape, Tensor, TensorError, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute, which keeps near-zero gradients from producing
/// huge ratios out of rounding noise.
const REL_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(input, element)` where the relative error peaked.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for element `elem` of input `which`.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], which: usize, elem: usize, step: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[elem];
    probe[which].data_mut()[elem] = x0 + step;
    let plus = f(&probe)?;
    probe[which].data_mut()[elem] = x0 - step;
    let minus = f(&probe)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(TensorError::NonFinite(format!(
            "objective at input {which}, element {elem}"
        )));
    }
    Ok((plus - minus) / (2.0 * step))
}

fn evaluate<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of a scalar computation against central
/// differences on every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let objective = |probe: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = evaluate(&f, probe, false)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (which, grad) in analytic.iter().enumerate() {
        for elem in 0..grad.numel() {
            let a = grad.data()[elem];
            if !a.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "analytic gradient at input {which}, element {elem}"
                )));
            }
            let n = central_difference(objective, inputs, which, elem, FD_STEP)?;
            let rel = relative_error(a, n);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((which, elem));
            }
            report.max_absolute_error = report.max_absolute_error.max((a - n).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
