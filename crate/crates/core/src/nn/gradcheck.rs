//! Central finite-difference verification of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst entry: (group, tensor, flat index).
    pub worst: Option<(String, String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor of [`relative_error`] used by [`grad_check`]: entries
/// whose gradient is below it are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `loss` with central differences of step `h`.
///
/// `max_per_tensor` limits the number of checked entries per tensor to an
/// evenly spaced deterministic subset; `None` checks every entry.
pub fn grad_check<F>(stores: &mut [ParamStore], loss: F, h: f64, max_per_tensor: Option<usize>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>) -> Result<Var>,
{
    let grads = {
        let refs: Vec<&ParamStore> = stores.iter().collect();
        let mut tape = Tape::new(&refs);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |stores: &[ParamStore]| -> Result<f64> {
        let refs: Vec<&ParamStore> = stores.iter().collect();
        let mut tape = Tape::new(&refs);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, worst_analytic: 0.0, worst_numeric: 0.0 };
    for s in 0..stores.len() {
        for p in 0..stores[s].params.len() {
            let n = stores[s].params[p].value.len();
            let stride = match max_per_tensor {
                Some(k) if k > 0 && n > k => n.div_ceil(k),
                _ => 1,
            };
            for e in (0..n).step_by(stride) {
                let orig = stores[s].params[p].value.data[e];
                stores[s].params[p].value.data[e] = orig + h;
                let plus = eval(stores)?;
                stores[s].params[p].value.data[e] = orig - h;
                let minus = eval(stores)?;
                stores[s].params[p].value.data[e] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads.get(s, super::params::ParamId(p)).map_or(0.0, |g| g.data[e]);
                let err = relative_error(analytic, numeric, REL_FLOOR);
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((stores[s].group.clone(), stores[s].params[p].name.clone(), e));
                    report.worst_analytic = analytic;
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
