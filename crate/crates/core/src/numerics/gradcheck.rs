//! Central finite-difference gradient oracle.
//!
//! The independent check for every analytic gradient in the toolkit:
//! perturb one scalar parameter at a time and form `(f(p+eps) - f(p-eps)) /
//! (2 eps)`. Deliberately simple and slow; it must share nothing with the
//! tape's backward pass.

use crate::error::{Error, Result};
use crate::numerics::params::{GradMap, ParamId, ParamStore};

/// Central-difference gradient of `loss_fn` with respect to every scalar in
/// `params`. `loss_fn` must be deterministic.
pub fn finite_difference_grad<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradMap>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut out = GradMap::new();
    for i in 0..params.len() {
        let pid = ParamId(i);
        let n = params.get(pid).numel();
        let mut grad = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(pid).data[j];
            work.get_mut(pid).data[j] = orig + eps;
            let up = loss_fn(&work)?;
            work.get_mut(pid).data[j] = orig - eps;
            let down = loss_fn(&work)?;
            work.get_mut(pid).data[j] = orig;
            grad[j] = (up - down) / (2.0 * eps);
        }
        out.insert(pid, grad);
    }
    Ok(out)
}
