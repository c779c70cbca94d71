//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! Only forward evaluations are used on the numeric side, so the oracle stays
//! independent of every backward rule it is used to verify.

use crate::error::Result;
use crate::tensor::{GradStore, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences with step `h`, for every value of every parameter in `only`
/// (or all parameters when `only` is empty).
pub fn check<F>(params: &ParamStore, only: &[ParamId], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut grads = GradStore::zeros_like(params);
    {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss, &mut grads)?;
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let ids: Vec<ParamId> = if only.is_empty() {
        params.ids().collect()
    } else {
        only.to_vec()
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads.get(id)[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
