//! Central finite-difference check of analytic parameter gradients.

use super::graph::Tensor;
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter scalar (or every `stride`-th one).
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// entries whose true gradient is zero from dominating.
pub fn check_gradients<F>(store: &ParamStore, analytic: &[Tensor], mut loss: F, eps: f64, stride: usize) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    const FLOOR: f64 = 1e-6;
    let mut probe = store.clone();
    let flat = store.to_flat();
    let grads: Vec<f64> = analytic.iter().flat_map(|g| g.iter().copied()).collect();
    assert_eq!(flat.len(), grads.len(), "gradient layout must match parameters");
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, max_abs_error: 0.0 };
    let mut work = flat.clone();
    for i in (0..flat.len()).step_by(stride.max(1)) {
        work[i] = flat[i] + eps;
        probe.load_flat(&work).expect("same layout");
        let up = loss(&probe);
        work[i] = flat[i] - eps;
        probe.load_flat(&work).expect("same layout");
        let down = loss(&probe);
        work[i] = flat[i];
        let numeric = (up - down) / (2.0 * eps);
        let abs = (numeric - grads[i]).abs();
        let rel = abs / numeric.abs().max(grads[i].abs()).max(FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}
