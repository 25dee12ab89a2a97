//! Central finite-difference oracle for analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding do not produce spurious large ratios.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with step `h` for every element of the listed parameters.
///
/// `loss_fn` must build the full graph from the store it is handed and
/// return a scalar node; it is re-run twice per checked element.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    let analytic = graph.backward(loss)?.param_grads(&graph, store);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        for i in 0..work.get(id).numel() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.get(id).data()[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
