//! Central finite-difference checks against the tape's analytic gradients.
//!
//! The numeric side only evaluates the forward closure; it never touches
//! `Tape::backward`.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error among entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Whether an analytic/numeric pair agrees: absolute error under
/// [`ABS_FLOOR`], or relative error under `rel_tol`.
pub fn agrees(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    let abs = (analytic - numeric).abs();
    if abs <= ABS_FLOOR {
        return true;
    }
    abs / analytic.abs().max(numeric.abs()) < rel_tol
}

/// Check `d loss / d inputs` where `build` records a scalar loss from the
/// input vars.
pub fn check<F>(inputs: &[Tensor], build: F, step: f64, rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, failures: 0 };
    let mut probe = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v, &inputs[ti]);
        for k in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[k];
            probe[ti].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs > ABS_FLOOR {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_error = report.max_rel_error.max(rel);
            }
            if !agrees(a, numeric, rel_tol) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
