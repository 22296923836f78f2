//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// Default step for central differences at double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param_errors: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the gradients stored in `params` against central differences of
/// `scalar_fn`, one coordinate at a time.
///
/// `scalar_fn` must be deterministic. A non-finite value at any perturbed
/// point is reported with the parameter being perturbed.
pub fn finite_diff_check<F>(mut scalar_fn: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be > 0, got {h}")));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut probe = params.clone();
    let mut per_param_errors = BTreeMap::new();
    for name in &names {
        let len = params.value(name)?.data().len();
        let mut worst: f64 = 0.0;
        for k in 0..len {
            let orig = params.value(name)?.data()[k];
            probe.value_mut(name)?.data_mut()[k] = orig + h;
            let plus = scalar_fn(&probe)?;
            probe.value_mut(name)?.data_mut()[k] = orig - h;
            let minus = scalar_fn(&probe)?;
            probe.value_mut(name)?.data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation { param: name.clone() });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = params.grad(name)?.data()[k];
            worst = worst.max(relative_error(analytic, numeric));
        }
        per_param_errors.insert(name.clone(), worst);
    }
    let (worst_param, max_rel_error) = per_param_errors
        .iter()
        .fold((String::new(), 0.0_f64), |(wn, wv), (n, &v)| {
            if v > wv || wn.is_empty() {
                (n.clone(), v.max(wv))
            } else {
                (wn, wv)
            }
        });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        per_param_errors,
    })
}

/// Checks a function of a single matrix argument against its analytic
/// gradient.
pub fn check_mat<F>(name: &str, x: &Mat, analytic: &Mat, mut f: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Mat) -> Result<f64>,
{
    let mut store = ParamStore::single(name, x.clone());
    store.accumulate_grad(name, analytic)?;
    finite_diff_check(|p| f(p.value(name)?), &store, h)
}
