//! Depth maps, error maps and point clouds, with their file formats.
//!
//! Depth and error maps are stored as 16-bit single-channel PNG where the
//! stored value divided by 256 is meters. A stored 0 marks a missing depth.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4, ValidityMask};

/// Largest value representable in the PNG convention, in meters.
pub const MAX_PNG_METERS: f64 = 65535.0 / 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthRole {
    SparseInput,
    Prediction,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorRole {
    /// Network-predicted expected absolute error.
    Prediction,
    /// Detached absolute residual used as the training label.
    Label,
    /// Aleatoric scale.
    Sigma,
}

/// Per-pixel depth in meters; 0 means no measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    role: DepthRole,
}

fn check_values(what: &str, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid(format!(
            "{what}: {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!(
            "{what}: values must be finite and >= 0, found {v}"
        )));
    }
    Ok(())
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, role: DepthRole) -> Result<Self> {
        check_values("DepthMap", width, height, &values)?;
        Ok(DepthMap {
            width,
            height,
            values,
            role,
        })
    }

    /// All-invalid map.
    pub fn empty(width: usize, height: usize, role: DepthRole) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            role,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn role(&self) -> DepthRole {
        self.role
    }

    pub fn with_role(mut self, role: DepthRole) -> Self {
        self.role = role;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Sets a pixel; negative or non-finite depths are stored as invalid.
    pub fn set(&mut self, row: usize, col: usize, depth: f64) {
        self.values[row * self.width + col] = if depth.is_finite() && depth > 0.0 {
            depth
        } else {
            0.0
        };
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.valid_count() as f64 / self.values.len().max(1) as f64
    }

    pub fn same_size(&self, other_w: usize, other_h: usize) -> bool {
        self.width == other_w && self.height == other_h
    }

    /// `(1, 1, H, W)` tensor of raw depths.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, 1, self.height, self.width), self.values.clone())
            .expect("depth map size")
    }

    pub fn mask(&self) -> ValidityMask {
        ValidityMask::from_positive(&self.to_tensor()).expect("single-channel mask")
    }

    /// Builds a map from one channel of a tensor, clamping negatives to invalid.
    pub fn from_tensor(t: &Tensor4, batch: usize, channel: usize, role: DepthRole) -> Self {
        let s = t.shape();
        let values = t
            .plane(batch, channel)
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        DepthMap {
            width: s.width,
            height: s.height,
            values,
            role,
        }
    }
}

/// Per-pixel expected absolute depth error in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    role: ErrorRole,
}

impl ErrorMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, role: ErrorRole) -> Result<Self> {
        check_values("ErrorMap", width, height, &values)?;
        Ok(ErrorMap {
            width,
            height,
            values,
            role,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn role(&self) -> ErrorRole {
        self.role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn from_tensor(t: &Tensor4, batch: usize, channel: usize, role: ErrorRole) -> Self {
        let s = t.shape();
        let values = t
            .plane(batch, channel)
            .iter()
            .map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 })
            .collect();
        ErrorMap {
            width: s.width,
            height: s.height,
            values,
            role,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {p:?} has non-finite coordinates")));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub(crate) fn from_points_unchecked(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }
}

fn decode_u16_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "expected single-channel grayscale png, got {:?}",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "expected 16-bit png, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let data = &buf[..frame.buffer_size()];
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect::<Vec<_>>();
    if values.len() != w * h {
        return Err(Error::Format("png payload size mismatch".into()));
    }
    Ok((w, h, values))
}

fn encode_u16_png(width: usize, height: usize, values: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

fn quantize(v: f64, keep_nonzero: bool) -> Result<u16> {
    let stored = (v * 256.0).round();
    if stored > 65535.0 {
        return Err(Error::invalid(format!(
            "{v} m exceeds the png range of {MAX_PNG_METERS} m"
        )));
    }
    let stored = stored as u16;
    Ok(if keep_nonzero && v > 0.0 { stored.max(1) } else { stored })
}

/// Decodes a 16-bit depth PNG (`meters = value / 256`, 0 = invalid).
pub fn read_depth_png(bytes: &[u8], role: DepthRole) -> Result<DepthMap> {
    let (w, h, raw) = decode_u16_png(bytes)?;
    let values = raw.iter().map(|&v| v as f64 / 256.0).collect();
    DepthMap::new(w, h, values, role)
}

/// Encodes `round(depth * 256)`; valid depths never collapse to the invalid 0.
pub fn write_depth_png(map: &DepthMap) -> Result<Vec<u8>> {
    let raw = map
        .values
        .iter()
        .map(|&v| quantize(v, true))
        .collect::<Result<Vec<_>>>()?;
    encode_u16_png(map.width, map.height, &raw)
}

pub fn read_error_png(bytes: &[u8], role: ErrorRole) -> Result<ErrorMap> {
    let (w, h, raw) = decode_u16_png(bytes)?;
    let values = raw.iter().map(|&v| v as f64 / 256.0).collect();
    ErrorMap::new(w, h, values, role)
}

pub fn write_error_png(map: &ErrorMap) -> Result<Vec<u8>> {
    let raw = map
        .values
        .iter()
        .map(|&v| quantize(v, false))
        .collect::<Result<Vec<_>>>()?;
    encode_u16_png(map.width, map.height, &raw)
}

/// Parses little-endian `f32` records `(x, y, z, reflectance)`; reflectance is dropped.
pub fn read_lidar_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "lidar scan of {} bytes has a trailing partial record",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    PointCloud::new(points)
}

/// Writes points as `f32` records with zero reflectance.
pub fn write_lidar_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for c in p.iter().chain(std::iter::once(&0.0)) {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

/// ASCII PLY with optional per-vertex RGB.
pub fn write_ply(cloud: &PointCloud, colors: Option<&[[u8; 3]]>) -> Result<String> {
    use std::fmt::Write;

    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::invalid(format!(
                "{} colors for {} points",
                c.len(),
                cloud.len()
            )));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", cloud.len()).unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        write!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(c) = colors {
            let [r, g, b] = c[i];
            write!(s, " {r} {g} {b}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Stops of the error color ramp, low to high: blue, cyan, green, yellow, red.
pub const ERROR_RAMP: [[u8; 3]; 5] = [
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
];

/// Nearest-rank percentile (`q` in `[0, 1]`) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Maps `[0, p99]` linearly onto [`ERROR_RAMP`]; larger errors saturate red.
pub fn error_colors(errors: &[f64]) -> Vec<[u8; 3]> {
    let top = percentile(errors, 0.99).unwrap_or(0.0);
    errors
        .iter()
        .map(|&e| {
            let t = if top > 0.0 { (e / top).clamp(0.0, 1.0) } else { 0.0 };
            ramp(t)
        })
        .collect()
}

fn ramp(t: f64) -> [u8; 3] {
    let pos = t * (ERROR_RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(ERROR_RAMP.len() - 2);
    let frac = pos - i as f64;
    let (a, b) = (ERROR_RAMP[i], ERROR_RAMP[i + 1]);
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (a[k] as f64 + (b[k] as f64 - a[k] as f64) * frac).round() as u8;
    }
    out
}
