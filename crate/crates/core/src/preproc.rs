//! Foreground/background estimation on sparse depth and assembly of the
//! three-channel network input.

use crate::depth::{DepthMap, DepthRole};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const DEFAULT_KERNEL: usize = 15;
pub const DEFAULT_SCALE_M: f64 = 100.0;

/// Local minimum (foreground) and maximum (background) of valid depths.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPair {
    pub foreground: DepthMap,
    pub background: DepthMap,
}

/// Sliding extremum along one axis. `fold` picks the better of two values
/// and `empty` is its identity, which doubles as the "no valid pixel" marker.
fn pool_axis(
    src: &[f64],
    width: usize,
    height: usize,
    radius: usize,
    horizontal: bool,
    empty: f64,
    fold: fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![empty; src.len()];
    for row in 0..height {
        for col in 0..width {
            let (pos, len) = if horizontal { (col, width) } else { (row, height) };
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(len - 1);
            let mut acc = empty;
            for k in lo..=hi {
                let idx = if horizontal { row * width + k } else { k * width + col };
                acc = fold(acc, src[idx]);
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// Validity-aware min/max pooling with a square `kernel` and stride 1.
/// Zeros are missing data, and so is everything beyond the border.
pub fn fgbg_pool(sparse: &DepthMap, kernel: usize) -> Result<PooledPair> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("pool kernel must be odd, got {kernel}")));
    }
    let (w, h) = (sparse.width(), sparse.height());
    let r = kernel / 2;
    let lows: Vec<f64> = sparse
        .values()
        .iter()
        .map(|&v| if v > 0.0 { v } else { f64::INFINITY })
        .collect();
    let highs: Vec<f64> = sparse
        .values()
        .iter()
        .map(|&v| if v > 0.0 { v } else { f64::NEG_INFINITY })
        .collect();
    let fg = pool_axis(&lows, w, h, r, true, f64::INFINITY, f64::min);
    let fg = pool_axis(&fg, w, h, r, false, f64::INFINITY, f64::min);
    let bg = pool_axis(&highs, w, h, r, true, f64::NEG_INFINITY, f64::max);
    let bg = pool_axis(&bg, w, h, r, false, f64::NEG_INFINITY, f64::max);
    let finish = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter().map(|x| if x.is_finite() { x } else { 0.0 }).collect()
    };
    Ok(PooledPair {
        foreground: DepthMap::new(w, h, finish(fg), DepthRole::SparseInput)?,
        background: DepthMap::new(w, h, finish(bg), DepthRole::SparseInput)?,
    })
}

/// `(1, 3, H, W)` tensor of (sparse, foreground, background) divided by `scale`.
pub fn assemble_input(sparse: &DepthMap, pooled: &PooledPair, scale: f64) -> Result<Tensor4> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("normalization scale must be > 0, got {scale}")));
    }
    let (w, h) = (sparse.width(), sparse.height());
    for (name, map) in [("foreground", &pooled.foreground), ("background", &pooled.background)] {
        if !map.same_size(w, h) {
            return Err(Error::InvalidShape {
                op: "assemble_input",
                detail: format!(
                    "{name} is {}x{}, sparse is {w}x{h}",
                    map.width(),
                    map.height()
                ),
            });
        }
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for map in [sparse, &pooled.foreground, &pooled.background] {
        data.extend(map.values().iter().map(|&v| v / scale));
    }
    Tensor4::from_vec(Shape::new(1, 3, h, w), data)
}

/// Pools with the default kernel and assembles the normalized input.
pub fn prepare_input(sparse: &DepthMap, scale: f64) -> Result<Tensor4> {
    let pooled = fgbg_pool(sparse, DEFAULT_KERNEL)?;
    assemble_input(sparse, &pooled, scale)
}
