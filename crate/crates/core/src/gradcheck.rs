//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates a forward closure with perturbed inputs, so it is
//! independent of the tape's backward rules by construction. It backs both
//! the unit tests and the `selftest` CLI surface.

use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp)?;
        xp[i] = orig - h;
        let fm = f(&xp)?;
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with a unit floor so near-zero gradients compare in
/// absolute terms: |a - n| / max(|a|, |n|, 1).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst relative error between an analytic gradient and a finite-difference
/// gradient, elementwise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
