#![allow(dead_code)]

use errmap::tensor::{Shape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Direct nested-loop cross-correlation.
pub fn conv2d_oracle(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    pad: usize,
) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.height + 2 * pad - ws.height) / stride + 1;
    let ow = (xs.width + 2 * pad - ws.width) / stride + 1;
    Tensor4::from_fn(Shape::new(xs.batch, ws.batch, oh, ow), |b, co, oy, ox| {
        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
        for ci in 0..xs.channels {
            for i in 0..ws.height {
                for j in 0..ws.width {
                    let y = (oy * stride + i) as isize - pad as isize;
                    let xx = (ox * stride + j) as isize - pad as isize;
                    if y >= 0 && xx >= 0 && (y as usize) < xs.height && (xx as usize) < xs.width {
                        acc += x.get(b, ci, y as usize, xx as usize) * w.get(co, ci, i, j);
                    }
                }
            }
        }
        acc
    })
}

/// Direct scatter formulation of a transpose convolution, weights `(in, out, kh, kw)`.
pub fn transpose_conv2d_oracle(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&Tensor4>,
    stride: usize,
    pad: usize,
) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.height - 1) * stride + ws.height - 2 * pad;
    let ow = (xs.width - 1) * stride + ws.width - 2 * pad;
    let mut out = Tensor4::zeros(Shape::new(xs.batch, ws.channels, oh, ow));
    for b in 0..xs.batch {
        for ci in 0..xs.channels {
            for y in 0..xs.height {
                for xx in 0..xs.width {
                    let v = x.get(b, ci, y, xx);
                    for co in 0..ws.channels {
                        for i in 0..ws.height {
                            for j in 0..ws.width {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (xx * stride + j) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let cur = out.get(b, co, oy as usize, ox as usize);
                                    out.set(b, co, oy as usize, ox as usize, cur + v * w.get(ci, co, i, j));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        out = Tensor4::from_fn(out.shape(), |b, c, h, w| out.get(b, c, h, w) + bias.data()[c]);
    }
    out
}

pub fn max_abs_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

use errmap::depth::{DepthMap, DepthRole};

/// Map with roughly `density` of its pixels set to depths in `[lo, hi)`.
pub fn random_sparse(rng: &mut impl Rng, w: usize, h: usize, density: f64, lo: f64, hi: f64) -> DepthMap {
    let values = (0..w * h)
        .map(|_| {
            if rng.random_bool(density) {
                rng.random_range(lo..hi)
            } else {
                0.0
            }
        })
        .collect();
    DepthMap::new(w, h, values, DepthRole::SparseInput).unwrap()
}

/// Exhaustive window scan: (min, max) over valid pixels, 0 when none.
pub fn pool_oracle(map: &DepthMap, kernel: usize) -> (Vec<f64>, Vec<f64>) {
    let r = (kernel / 2) as i64;
    let (w, h) = (map.width() as i64, map.height() as i64);
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let mut found: Vec<f64> = Vec::new();
            for y in row - r..=row + r {
                for x in col - r..=col + r {
                    if y >= 0 && x >= 0 && y < h && x < w {
                        let v = map.get(y as usize, x as usize);
                        if v > 0.0 {
                            found.push(v);
                        }
                    }
                }
            }
            let min = found.iter().copied().fold(f64::INFINITY, f64::min);
            lo.push(if found.is_empty() { 0.0 } else { min });
            hi.push(found.iter().copied().fold(0.0, f64::max));
        }
    }
    (lo, hi)
}
