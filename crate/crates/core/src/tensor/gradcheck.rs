//! Central finite-difference gradient checking.

use super::{Graph, Tensor4, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements left out because a `+-eps` step changed a ReLU/abs/guard
    /// branch somewhere in the graph, where central differences are invalid.
    pub skipped: usize,
    /// Analytic gradients, one per parameter.
    pub analytic: Vec<Tensor4>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences with step `eps`.
///
/// `f` builds the graph from the parameter vars and returns the scalar
/// root. Stop-gradient nodes keep the values from the unperturbed
/// evaluation during the finite-difference sweeps, so detached branches are
/// treated as the constants they are for the analytic gradient. Elements
/// whose perturbation crosses a non-smooth point are counted in `skipped`
/// instead of compared.
pub fn finite_diff_gradcheck<F>(f: F, params: &[Tensor4], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("gradcheck step must be > 0, got {eps}")));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let root = f(&mut graph, &vars)?;
    let mut grads = graph.backward(root)?;
    let frozen = graph.stopped_values();
    let analytic: Vec<Tensor4> = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect();
    drop(graph);

    let eval = |values: &[Tensor4]| -> Result<(f64, u64)> {
        let mut g = Graph::with_frozen(frozen.clone());
        let vars: Vec<Var> = values.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok((g.value(root).item(), g.branch_signature()))
    };
    let (_, base) = eval(params)?;

    let mut work: Vec<Tensor4> = params.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let mut skipped = 0;
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (plus, sig_plus) = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let (minus, sig_minus) = eval(&work)?;
            work[p].data_mut()[i] = orig;
            if sig_plus != base || sig_minus != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[i], numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            checked += 1;
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err;
                worst = Some((p, i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked,
        skipped,
        analytic,
    })
}
