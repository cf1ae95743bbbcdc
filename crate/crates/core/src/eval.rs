//! Threshold filtering, keep-ratio inversion, depth metrics and keep-ratio
//! sweeps.
//!
//! Thresholds are reported in millimeters and stored in meters; filtering
//! compares in meters so a threshold taken from an error value keeps that
//! pixel exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthRole, ErrorMap, ErrorRole};
use crate::error::{Error, Result};
use crate::net::{predict, DepthModel};
use crate::synth::SamplePair;

pub const MM_PER_M: f64 = 1000.0;
/// `delta_k` counts ratios below `DELTA_BASE^k`.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    threshold_m: f64,
}

impl FilterSpec {
    pub fn from_mm(threshold_mm: f64) -> Result<Self> {
        FilterSpec::from_meters(threshold_mm / MM_PER_M)
    }

    pub fn from_meters(threshold_m: f64) -> Result<Self> {
        if !(threshold_m > 0.0) {
            return Err(Error::invalid(format!("threshold {threshold_m} m must be > 0")));
        }
        Ok(FilterSpec { threshold_m })
    }

    /// Keeps everything.
    pub fn unbounded() -> Self {
        FilterSpec {
            threshold_m: f64::INFINITY,
        }
    }

    pub fn threshold_m(&self) -> f64 {
        self.threshold_m
    }

    pub fn threshold_mm(&self) -> f64 {
        self.threshold_m * MM_PER_M
    }

    pub fn keeps(&self, error_m: f64) -> bool {
        error_m <= self.threshold_m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub map: DepthMap,
    pub kept: usize,
    /// Valid pixels before filtering.
    pub candidates: usize,
}

impl Filtered {
    pub fn keep_ratio(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.kept as f64 / self.candidates as f64
        }
    }
}

/// Keeps valid pixels whose predicted error is at most the threshold.
pub fn filter_by_threshold(pred: &DepthMap, err: &ErrorMap, spec: FilterSpec) -> Result<Filtered> {
    if !pred.same_size(err.width(), err.height()) {
        return Err(Error::invalid(format!(
            "prediction {}x{} and error {}x{} differ in size",
            pred.width(),
            pred.height(),
            err.width(),
            err.height()
        )));
    }
    let mut kept = 0;
    let mut candidates = 0;
    let values = pred
        .values()
        .iter()
        .zip(err.values())
        .map(|(&d, &e)| {
            if d <= 0.0 {
                return 0.0;
            }
            candidates += 1;
            if spec.keeps(e) {
                kept += 1;
                d
            } else {
                0.0
            }
        })
        .collect();
    Ok(Filtered {
        map: DepthMap::new(pred.width(), pred.height(), values, DepthRole::Prediction)?,
        kept,
        candidates,
    })
}

/// Smallest threshold whose keep ratio over `errors_m` reaches `target`.
/// Every error equal to the returned threshold is kept.
pub fn keep_ratio_to_threshold(errors_m: &[f64], target: f64) -> Result<FilterSpec> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("keep ratio {target} must be in (0, 1]")));
    }
    if errors_m.is_empty() {
        return Err(Error::invalid("no pixels to choose a threshold from"));
    }
    let mut sorted = errors_m.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let reaches = |k: usize| k as f64 / n as f64 >= target;
    let mut k = ((target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && reaches(k - 1) {
        k -= 1;
    }
    while !reaches(k) && k < n {
        k += 1;
    }
    let t = sorted[k - 1];
    // A zero error still needs a positive threshold.
    FilterSpec::from_meters(if t > 0.0 { t } else { f64::MIN_POSITIVE })
}

/// Depth metrics over a set of (prediction, ground truth) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub log10: f64,
    /// Population variance of the signed error, mm^2.
    pub error_variance_mm2: f64,
}

/// Running sums that merge in any order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    n: usize,
    sum_sq: f64,
    sum_abs: f64,
    delta: [usize; 3],
    sum_rel: f64,
    sum_log10: f64,
    mean: f64,
    m2: f64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        MetricAccumulator::default()
    }

    /// Adds one pixel; both depths must be positive.
    pub fn push(&mut self, pred: f64, gt: f64) {
        let r = pred - gt;
        self.n += 1;
        self.sum_sq += r * r;
        self.sum_abs += r.abs();
        let ratio = (pred / gt).max(gt / pred);
        for (k, count) in self.delta.iter_mut().enumerate() {
            if ratio < DELTA_BASE.powi(k as i32 + 1) {
                *count += 1;
            }
        }
        self.sum_rel += r.abs() / gt;
        self.sum_log10 += (pred.log10() - gt.log10()).abs();
        let d = r - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (r - self.mean);
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        for k in 0..3 {
            self.delta[k] += other.delta[k];
        }
        self.sum_rel += other.sum_rel;
        self.sum_log10 += other.sum_log10;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::invalid("no pixels are valid in both prediction and ground truth"));
        }
        let n = self.n as f64;
        Ok(Metrics {
            count: self.n,
            rmse_mm: (self.sum_sq / n).sqrt() * MM_PER_M,
            mae_mm: self.sum_abs / n * MM_PER_M,
            delta1: self.delta[0] as f64 / n,
            delta2: self.delta[1] as f64 / n,
            delta3: self.delta[2] as f64 / n,
            rel: self.sum_rel / n,
            log10: self.sum_log10 / n,
            error_variance_mm2: self.m2 / n * MM_PER_M * MM_PER_M,
        })
    }
}

/// Adds every pixel valid in both maps.
pub fn accumulate(acc: &mut MetricAccumulator, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if !pred.same_size(gt.width(), gt.height()) {
        return Err(Error::invalid("prediction and ground truth differ in size"));
    }
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if p > 0.0 && g > 0.0 {
            acc.push(p, g);
        }
    }
    Ok(())
}

/// Metrics over pixels valid in both maps.
pub fn metrics(pred: &DepthMap, gt: &DepthMap) -> Result<Metrics> {
    let mut acc = MetricAccumulator::new();
    accumulate(&mut acc, pred, gt)?;
    acc.finish()
}

/// Pooled evaluation pixels: valid in prediction and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSet {
    pub pred: Vec<f64>,
    pub err: Vec<f64>,
    pub gt: Vec<f64>,
}

impl PixelSet {
    pub fn new() -> Self {
        PixelSet::default()
    }

    pub fn add_frame(&mut self, pred: &DepthMap, err: &ErrorMap, gt: &DepthMap) -> Result<()> {
        let (w, h) = (pred.width(), pred.height());
        if !err.width().eq(&w) || err.height() != h || !gt.same_size(w, h) {
            return Err(Error::invalid("prediction, error and ground truth differ in size"));
        }
        for i in 0..pred.values().len() {
            let (p, g) = (pred.values()[i], gt.values()[i]);
            if p > 0.0 && g > 0.0 {
                self.pred.push(p);
                self.err.push(err.values()[i]);
                self.gt.push(g);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    /// True absolute error of every pixel.
    pub fn abs_errors(&self) -> Vec<f64> {
        self.pred.iter().zip(&self.gt).map(|(p, g)| (p - g).abs()).collect()
    }

    pub fn report(&self, spec: FilterSpec) -> FilterReport {
        let mut acc = MetricAccumulator::new();
        for i in 0..self.len() {
            if spec.keeps(self.err[i]) {
                acc.push(self.pred[i], self.gt[i]);
            }
        }
        FilterReport {
            threshold_mm: spec.threshold_mm(),
            keep_ratio: if self.is_empty() {
                0.0
            } else {
                acc.count() as f64 / self.len() as f64
            },
            kept: acc.count(),
            metrics: acc.finish().ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// `inf` when nothing is filtered.
    #[serde(with = "finite_or_null")]
    pub threshold_mm: f64,
    pub keep_ratio: f64,
    pub kept: usize,
    /// Absent when no pixel survives.
    pub metrics: Option<Metrics>,
}

/// JSON has no infinity; write it as null.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepGrid {
    ThresholdsMm(Vec<f64>),
    /// Fractions in (0, 1].
    KeepRatios(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    /// Ordered by increasing threshold.
    pub points: Vec<FilterReport>,
}

pub fn sweep(set: &PixelSet, grid: &SweepGrid) -> Result<SweepCurve> {
    let specs = match grid {
        SweepGrid::ThresholdsMm(ts) if !ts.is_empty() => {
            ts.iter().map(|&t| FilterSpec::from_mm(t)).collect::<Result<Vec<_>>>()?
        }
        SweepGrid::KeepRatios(rs) if !rs.is_empty() => rs
            .iter()
            .map(|&r| keep_ratio_to_threshold(&set.err, r))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::invalid("sweep grid is empty")),
    };
    let mut points: Vec<FilterReport> = specs.into_iter().map(|s| set.report(s)).collect();
    points.sort_by(|a, b| a.threshold_mm.total_cmp(&b.threshold_mm));
    Ok(SweepCurve { points })
}

impl SweepCurve {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }

    /// Aligned table, one row per point, highest keep ratio first.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>14} {:>14} {:>10} {:>12} {:>12} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "threshold_mm", "keep_ratio_%", "kept", "rmse_mm", "mae_mm", "delta1", "delta2", "delta3", "rel", "log10"
        );
        for p in self.points.iter().rev() {
            let t = if p.threshold_mm.is_finite() {
                format!("{:.1}", p.threshold_mm)
            } else {
                "inf".to_string()
            };
            let _ = write!(out, "{t:>14} {:>14.3} {:>10}", p.keep_ratio * 100.0, p.kept);
            match &p.metrics {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        " {:>12.2} {:>12.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                        m.rmse_mm, m.mae_mm, m.delta1, m.delta2, m.delta3, m.rel, m.log10
                    );
                }
                None => {
                    let _ = writeln!(out, " {:>12} {:>12} {:>8} {:>8} {:>8} {:>8} {:>8}", "-", "-", "-", "-", "-", "-", "-");
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensificationReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub full_count: usize,
    /// `kept / input`.
    pub factor: f64,
    /// `kept / full`.
    pub keep_vs_full: f64,
}

impl DensificationReport {
    pub fn from_counts(input_count: usize, kept_count: usize, full_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        DensificationReport {
            input_count,
            kept_count,
            full_count,
            factor: ratio(kept_count, input_count),
            keep_vs_full: ratio(kept_count, full_count),
        }
    }
}

/// Counts for a sparse input and the filtered dense output; "full" is
/// every pixel of the frame.
pub fn densification_report(input: &DepthMap, kept: &DepthMap) -> Result<DensificationReport> {
    if !input.same_size(kept.width(), kept.height()) {
        return Err(Error::invalid("input and kept maps differ in size"));
    }
    Ok(DensificationReport::from_counts(
        input.valid_count(),
        kept.valid_count(),
        kept.values().len(),
    ))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant or too short.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Pooled predictions of a model over a set of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    /// Pixels valid in the prediction and the semi-dense ground truth.
    pub vs_gt: PixelSet,
    /// Pixels valid in the prediction and the true dense depth.
    pub vs_dense: PixelSet,
}

impl Evaluation {
    /// Rank correlation between predicted error and the true absolute error
    /// against dense depth.
    pub fn spearman(&self) -> Option<f64> {
        spearman(&self.vs_dense.err, &self.vs_dense.abs_errors())
    }
}

/// Runs `model` on every sample. Models without an error head get zero errors.
pub fn evaluate_model<M: DepthModel + ?Sized>(
    model: &M,
    scale: f64,
    kernel: usize,
    samples: &[SamplePair],
) -> Result<Evaluation> {
    let mut out = Evaluation::default();
    for s in samples {
        let p = predict(model, &s.input, scale, kernel)?;
        let err = p.error.unwrap_or_else(|| {
            ErrorMap::new(
                p.depth.width(),
                p.depth.height(),
                vec![0.0; p.depth.values().len()],
                ErrorRole::Prediction,
            )
            .expect("zero map")
        });
        out.vs_gt.add_frame(&p.depth, &err, &s.gt)?;
        out.vs_dense.add_frame(&p.depth, &err, &s.dense)?;
    }
    Ok(out)
}

/// Mean of all valid ground-truth depths.
pub fn mean_depth<'a>(maps: impl IntoIterator<Item = &'a DepthMap>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for m in maps {
        for &v in m.values().iter().filter(|&&v| v > 0.0) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    Ok(sum / n as f64)
}

/// Metrics of predicting `depth` everywhere against each ground truth.
pub fn constant_baseline<'a>(depth: f64, gts: impl IntoIterator<Item = &'a DepthMap>) -> Result<Metrics> {
    let mut acc = MetricAccumulator::new();
    for g in gts {
        for &v in g.values().iter().filter(|&&v| v > 0.0) {
            acc.push(depth, v);
        }
    }
    acc.finish()
}
