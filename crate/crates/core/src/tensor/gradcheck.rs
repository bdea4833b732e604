//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares the tape gradient of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
///
/// `f` receives one leaf per parameter and must return a scalar. Relative
/// error uses `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.variable(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    let eval = |probe: &[Tensor], which: (usize, usize)| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = probe.iter().map(|p| tape.constant(p.clone())).collect();
        let value = f(&tape, &vars).and_then(|v| v.item()).map_err(|e| {
            Error::Evaluation(format!("parameter {} entry {}: {e}", which.0, which.1))
        })?;
        if value.is_nan() {
            return Err(Error::Evaluation(format!(
                "NaN at parameter {} entry {}",
                which.0, which.1
            )));
        }
        Ok(value)
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + h;
            let plus = eval(&probe, (p, i))?;
            probe[p].data_mut()[i] = orig - h;
            let minus = eval(&probe, (p, i))?;
            probe[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[p].data()[i];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.entries_checked == 1 {
                report.max_rel_error = rel;
                report.worst = (p, i);
                report.analytic = exact;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
