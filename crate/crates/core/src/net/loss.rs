//! Depth, error and likelihood losses and the ratio combiner.

use serde::{Deserialize, Serialize};

use super::{AleatoricVariant, HeadMode, HeadOutputs};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor4, ValidityMask, Var};

/// Smallest baseline the ratio combiner divides by.
pub const RATIO_GUARD: f64 = 1e-12;

/// Masked MSE between predicted depth and ground truth.
pub fn loss_depth(g: &mut Graph, depth: Var, gt: Var, mask: &ValidityMask) -> Result<Var> {
    g.masked_mse(depth, gt, mask)
}

/// Detached `|depth - gt|` on valid pixels, zero elsewhere. Rebuilt from the
/// current prediction every time it is called.
pub fn error_ground_truth(g: &mut Graph, depth: Var, gt: Var, mask: &ValidityMask) -> Result<Var> {
    let diff = g.sub(depth, gt)?;
    let abs = g.abs(diff);
    let label = g.stop_gradient(abs)?;
    let m = g.constant(mask.tensor().clone());
    g.mul(label, m)
}

pub fn loss_error(g: &mut Graph, error: Var, gt_error: Var, mask: &ValidityMask) -> Result<Var> {
    g.masked_mse(error, gt_error, mask)
}

/// Per-pixel negative log-likelihood averaged over valid pixels. `head` is
/// the softplus output: a variance for `Mse`, a Laplace scale for `Mae`.
pub fn aleatoric_loss(
    g: &mut Graph,
    depth: Var,
    head: Var,
    gt: Var,
    mask: &ValidityMask,
    variant: AleatoricVariant,
) -> Result<Var> {
    let r = g.sub(depth, gt)?;
    let per_pixel = match variant {
        AleatoricVariant::Mse => {
            let sq = g.square(r);
            let two_var = g.scale(head, 2.0);
            let fit = g.div_guarded(sq, two_var)?;
            let log_var = g.log_guarded(head);
            let half_log = g.scale(log_var, 0.5);
            g.add(fit, half_log)?
        }
        AleatoricVariant::Mae => {
            let abs = g.abs(r);
            let fit = g.div_guarded(abs, head)?;
            let log_b = g.log_guarded(head);
            g.add(fit, log_b)?
        }
    };
    g.masked_mean(per_pixel, mask)
}

#[derive(Clone, Debug)]
pub struct Combined {
    pub total: Var,
    /// Detached copies of each loss (guarded), empty for fixed weights.
    pub baselines: Vec<Var>,
}

/// `sum_i L_i / stop_gradient(L_i)`: every term is 1 in value and the
/// gradient is `sum_i grad(L_i) / L_i`.
pub fn ratio_combine(g: &mut Graph, losses: &[Var]) -> Result<Combined> {
    if losses.is_empty() {
        return Err(Error::invalid("ratio_combine needs at least one loss"));
    }
    let mut total = None;
    let mut baselines = Vec::with_capacity(losses.len());
    for &l in losses {
        let shape = g.shape(l);
        if !shape.is_scalar() {
            return Err(Error::NonScalarRoot(shape));
        }
        let v = g.value(l).item();
        if !(v >= 0.0) {
            return Err(Error::Domain {
                op: "ratio_combine",
                detail: format!("loss value {v} is not >= 0"),
            });
        }
        let copy = g.stop_gradient(l)?;
        let base = if g.value(copy).item() < RATIO_GUARD {
            g.constant(Tensor4::scalar(RATIO_GUARD))
        } else {
            copy
        };
        baselines.push(base);
        let term = g.div(l, base)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(Combined {
        total: total.expect("non-empty"),
        baselines,
    })
}

/// `sum_i w_i L_i` with constant weights.
pub fn fixed_combine(g: &mut Graph, losses: &[Var], weights: &[f64]) -> Result<Combined> {
    if losses.is_empty() || losses.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} losses with {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let mut total = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let term = g.scale(l, w);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(Combined {
        total: total.expect("non-empty"),
        baselines: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combiner {
    Ratio,
    FixedWeights(Vec<f64>),
}

/// Graph handles of one training objective.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub loss_depth: Var,
    pub loss_error: Option<Var>,
    pub gt_error: Option<Var>,
    pub baselines: Vec<Var>,
    pub total: Var,
    /// Number of terms in `total` (1 in aleatoric mode).
    pub active: usize,
}

/// Mode-appropriate objective. Aleatoric mode optimizes the likelihood
/// alone; its value can be negative, so it is not ratio-normalized.
pub fn training_losses(
    g: &mut Graph,
    mode: HeadMode,
    variant: AleatoricVariant,
    out: HeadOutputs,
    gt: Var,
    mask: &ValidityMask,
    combiner: &Combiner,
) -> Result<LossBundle> {
    let ld = loss_depth(g, out.depth, gt, mask)?;
    let need_error = || {
        out.error
            .ok_or_else(|| Error::invalid(format!("{mode:?} mode needs an error head")))
    };
    let (loss_error, gt_error, losses) = match mode {
        HeadMode::DepthOnly => (None, None, vec![ld]),
        HeadMode::ErrorPrediction => {
            let label = error_ground_truth(g, out.depth, gt, mask)?;
            let le = loss_error(g, need_error()?, label, mask)?;
            (Some(le), Some(label), vec![ld, le])
        }
        HeadMode::Aleatoric => {
            let nll = aleatoric_loss(g, out.depth, need_error()?, gt, mask, variant)?;
            return Ok(LossBundle {
                loss_depth: ld,
                loss_error: Some(nll),
                gt_error: None,
                baselines: Vec::new(),
                total: nll,
                active: 1,
            });
        }
    };
    let combined = match combiner {
        Combiner::Ratio => ratio_combine(g, &losses)?,
        Combiner::FixedWeights(w) => fixed_combine(g, &losses, w)?,
    };
    Ok(LossBundle {
        loss_depth: ld,
        loss_error,
        gt_error,
        baselines: combined.baselines,
        total: combined.total,
        active: losses.len(),
    })
}
