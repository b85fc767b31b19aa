use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `f` at `point` coordinate by coordinate with step `eps ∈ [1e-7, 1e-4]`.
///
/// `f` receives the point's tensors as tape leaves and must return a scalar.
/// It is re-run on fresh tapes for every perturbation, so it has to be
/// deterministic (fix any dropout seed inside the closure).
pub fn grad_check<F>(f: F, point: &[Matrix<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |inputs: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Matrix<f64>> = point.to_vec();
    for (t, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for k in 0..work[t].len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (t, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
