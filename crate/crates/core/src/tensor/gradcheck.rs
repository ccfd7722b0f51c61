//! Central finite-difference checks of analytic gradients.

use super::{GradBuffer, ParamStore, TensorError};
use crate::parallel::{map_range, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − n| / max(1, |a|, |n|)`: relative for large gradients, absolute
/// below unit magnitude where cancellation in `f(θ±eps)` dominates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `f` at the current point
/// with `(f(θ+eps) − f(θ−eps)) / 2eps` for every trainable entry.
pub fn check_gradients<E, F>(
    store: &ParamStore,
    eps: f64,
    tol: f64,
    exec: Execution,
    f: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError> + Send,
    F: Fn(&ParamStore) -> Result<(f64, GradBuffer), E> + Sync + Send,
{
    let (loss, analytic) = f(store)?;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck loss" }.into());
    }
    let entries: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.tensor.len()).map(move |i| (id.index(), i)))
        .collect();
    let ids: Vec<_> = store.ids().collect();

    let results = map_range(exec, entries.len(), |e| -> Result<GradCheckEntry, E> {
        let (pi, i) = entries[e];
        let id = ids[pi];
        let mut probe = store.clone();
        let eval = |probe: &mut ParamStore, v: f64| -> Result<f64, E> {
            probe.get_mut(id).tensor.data_mut()[i] = v;
            let (l, _) = f(probe)?;
            if l.is_finite() {
                Ok(l)
            } else {
                Err(TensorError::NonFinite { op: "gradcheck loss" }.into())
            }
        };
        let x0 = store.get(id).tensor.data()[i];
        let plus = eval(&mut probe, x0 + eps)?;
        let minus = eval(&mut probe, x0 - eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(id).map_or(0.0, |g| g[i]);
        Ok(GradCheckEntry {
            param: store.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        })
    });

    let mut report = GradCheckReport::default();
    for r in results {
        let entry = r?;
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(entry.rel_error);
        if entry.rel_error > tol {
            report.failures.push(entry);
        }
    }
    Ok(report)
}
