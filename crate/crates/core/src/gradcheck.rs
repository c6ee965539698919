//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.tensor(out).numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

fn scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs, false)?;
    Ok(tape.value(out)[0])
}

/// Compares backward gradients of the scalar function `f` against central
/// differences with step `h`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let first = scalar(&f, inputs)?;
    let second = scalar(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Contract(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        tol,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.elements_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
