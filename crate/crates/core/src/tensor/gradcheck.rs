use super::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Round-off in a central
/// difference of an O(1) loss is about 1e-11, so gradients that vanish
/// exactly (biases cancelled by a softmax) must not be divided by less.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|analytic| + |numeric| + GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar. It has to be deterministic: anything stochastic inside it
/// (kernel sampling) must re-seed its RNG on every call.
pub fn grad_check<E, F>(mut f: F, params: &[Tensor]) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.item(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + GRAD_CHECK_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - GRAD_CHECK_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = grads[ei];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
