//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the reverse pass it verifies.

use super::{Matrix, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric values at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Denominator floor. Central differences carry roughly 1e-10 of rounding
/// noise, so entries below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` at one coordinate of a vector.
pub fn numeric_partial(x: &mut [f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Compares `analytic` (indexed like `params`) against central differences of
/// `loss`. At most `max_entries` coordinates per parameter are probed, spread
/// evenly; `None` probes all of them.
pub fn check_params(
    params: &mut ParamSet,
    loss: impl Fn(&ParamSet) -> f64,
    analytic: &[Option<Matrix>],
    h: f64,
    max_entries: Option<usize>,
) -> GradCheck {
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = match max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = params.get(id).data[k];
            params.get_mut(id).data[k] = orig + h;
            let plus = loss(params);
            params.get_mut(id).data[k] = orig - h;
            let minus = loss(params);
            params.get_mut(id).data[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data[k]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((params.name(id).to_string(), k, a, numeric));
                }
            }
        }
    }
    report
}
