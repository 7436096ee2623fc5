use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest denominator used when forming relative errors, so that entries
/// whose true gradient is (numerically) zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function of `params`.
///
/// `f` must record its computation on the given tape using the supplied
/// parameter variables and return a `1 × 1` result. Every parameter entry is
/// perturbed by `±step` and the central difference
/// `(f(θ+h) − f(θ−h)) / 2h` is compared against the reverse-mode gradient.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.borrowed(p, true)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.item(out)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {value}")));
        }
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.borrowed(p, false)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.item(out)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {value}")));
        }
        Ok(value)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut entries_checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let original = work[pi].data()[ei];
            work[pi].data_mut()[ei] = original + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = original - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entries_checked += 1;
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, ei));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        entries_checked,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
