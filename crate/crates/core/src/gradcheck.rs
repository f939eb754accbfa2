//! Central finite-difference verification of analytic parameter gradients.

use crate::autograd::Gradients;
use crate::error::Result;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    /// Scalars that only matched at a reduced step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `grads` against central differences of `loss` for every scalar
/// of every parameter accepted by `select` (all of them when `None`).
/// The store is restored exactly before returning.
pub fn check<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    step: f64,
    select: Option<&dyn Fn(&str) -> bool>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    run(store, grads, &[step], f64::INFINITY, select, loss)
}

/// Like [`check`], but a scalar whose error reaches `tol` is retried at
/// `step / 10` and `step / 100`, keeping the smallest error. A ReLU or
/// max kink inside `[x - step, x + step]` spoils the central difference
/// at that step only; a wrong analytic gradient fails at every step.
pub fn check_refined<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    step: f64,
    tol: f64,
    select: Option<&dyn Fn(&str) -> bool>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    run(store, grads, &[step, step / 10.0, step / 100.0], tol, select, loss)
}

fn run<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    steps: &[f64],
    tol: f64,
    select: Option<&dyn Fn(&str) -> bool>,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        refined: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if select.is_some_and(|f| !f(&name)) {
            continue;
        }
        for j in 0..store.value(id).len() {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let orig = store.value(id).data()[j];
            let mut best = (f64::INFINITY, f64::NAN);
            for (k, &h) in steps.iter().enumerate() {
                store.value_mut(id).data_mut()[j] = orig + h;
                let up = loss(store);
                store.value_mut(id).data_mut()[j] = orig - h;
                let down = loss(store);
                store.value_mut(id).data_mut()[j] = orig;
                let numeric = (up? - down?) / (2.0 * h);
                let err = relative_error(analytic, numeric);
                if err < best.0 {
                    best = (err, numeric);
                }
                if best.0 < tol {
                    report.refined += usize::from(k > 0);
                    break;
                }
            }
            report.checked += 1;
            if best.0 > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(best.0);
                report.worst = Some((name.clone(), j, analytic, best.1));
            }
        }
    }
    Ok(report)
}
