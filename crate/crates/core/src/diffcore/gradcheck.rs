//! Central finite-difference gradient audits.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the backward rules it checks.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    /// Per-operation audit: `h = 1e-5`, relative `1e-4`, absolute floor `1e-7`.
    pub const PER_OP: Tolerance = Tolerance {
        step: 1e-5,
        rel: 1e-4,
        abs: 1e-7,
    };

    /// End-to-end audit through the total loss: relative `1e-3`, floor `1e-6`.
    pub const END_TO_END: Tolerance = Tolerance {
        step: 1e-5,
        rel: 1e-3,
        abs: 1e-6,
    };
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub mismatches: Vec<GradMismatch>,
    /// Largest `|a - n| / max(|a|, |n|)` among entries above the absolute floor.
    pub worst_rel: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares back-propagated gradients of the scalar built by `loss` with
/// central differences, for every scalar of every parameter accepted by
/// `select`.
pub fn check_gradients<F, S>(
    store: &mut ParamStore,
    tol: Tolerance,
    mut loss: F,
    select: S,
) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let mut report = GradReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !select(&store.get(id).name) {
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.as_slice()[k];
            store.get_mut(id).value.as_mut_slice()[k] = orig + tol.step;
            let up = eval(store)?;
            store.get_mut(id).value.as_mut_slice()[k] = orig - tol.step;
            let down = eval(store)?;
            store.get_mut(id).value.as_mut_slice()[k] = orig;

            let numeric = (up - down) / (2.0 * tol.step);
            let analytic = store.get(id).grad.as_slice()[k];
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            report.checked += 1;
            if diff > tol.abs {
                report.worst_rel = report.worst_rel.max(diff / scale);
            }
            if diff > tol.abs + tol.rel * scale {
                report.mismatches.push(GradMismatch {
                    param: store.get(id).name.clone(),
                    index: k,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
