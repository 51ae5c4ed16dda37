//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward pass; it never touches the
//! analytic backward code it is checking.

use super::{ModelParams, ParamId, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitude below which errors are measured absolutely rather than
    /// relative to the gradient.
    pub floor: f64,
    /// Check at most this many evenly strided elements per parameter.
    pub max_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-3,
            max_per_param: usize::MAX,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's gradients of `loss` for every parameter against
/// central differences. `loss` must be a pure function of the parameters
/// (seed any randomness inside it).
pub fn check<F>(params: &ModelParams<f64>, opts: GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape)?;
        tape.backward(out)?
    };
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut tape = Tape::new(p);
        let out = loss(&mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in params.ids() {
        let len = params.get(id).len();
        let stride = len.div_ceil(opts.max_per_param.max(1)).max(1);
        for idx in (0..len).step_by(stride) {
            let a = analytic.param(id).map_or(0.0, |g| g[idx]);
            let n = numeric_at(&mut work, id, idx, opts.step, &eval)?;
            let err = relative_error(a, n, opts.floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), idx, a, n));
            }
        }
    }
    Ok(report)
}

fn numeric_at<F>(work: &mut ModelParams<f64>, id: ParamId, idx: usize, h: f64, eval: &F) -> Result<f64>
where
    F: Fn(&ModelParams<f64>) -> Result<f64>,
{
    let orig = work.get(id).data()[idx];
    work.get_mut(id).data_mut()[idx] = orig + h;
    let plus = eval(work)?;
    work.get_mut(id).data_mut()[idx] = orig - h;
    let minus = eval(work)?;
    work.get_mut(id).data_mut()[idx] = orig;
    Ok((plus - minus) / (2.0 * h))
}
