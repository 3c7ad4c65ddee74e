//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use std::collections::BTreeMap;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen for each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub checked_entries: usize,
}

/// Relative error with an absolute floor so that two vanishing gradients
/// compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare backprop gradients of the scalar built by `f` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every trainable
/// parameter (at most `max_entries_per_param` evenly strided entries each).
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    tol: f64,
    max_entries_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut checked = 0;
    for p in params.iter().filter(|p| p.trainable) {
        let n = p.tensor.len();
        let stride = match max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.get(&p.name);
        let mut worst: f64 = 0.0;
        for idx in (0..n).step_by(stride) {
            let orig = p.tensor.data()[idx];
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&p.name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.map_or(0.0, |t| t.data()[idx]);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        per_param.insert(p.name.clone(), worst);
    }
    let max_rel_error = per_param.values().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
        checked_entries: checked,
    })
}
