//! Procedural street-like scenes that stand in for a real LiDAR dataset:
//! analytic true-dense depth, a sparse beam-like input and a semi-dense
//! ground truth that misses depth edges.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{read_depth_png, write_depth_png, DepthMap, DepthRole, MAX_PNG_METERS};
use crate::config::worker_threads;
use crate::error::{Error, Result};
use crate::projection::CameraIntrinsics;

/// Height of the camera above the ground plane, meters.
pub const CAMERA_HEIGHT: f64 = 1.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsePattern {
    Scanline,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Lateral half-extent in meters within which objects are placed.
    pub extent: f64,
    pub min_depth: f64,
    /// Depth of the backdrop wall; every ray ends there at the latest.
    pub max_depth: f64,
    pub walls: (usize, usize),
    pub boxes: (usize, usize),
    pub spheres: (usize, usize),
    pub input_density: f64,
    pub gt_density: f64,
    pub pattern: SparsePattern,
    /// Beam rows are this many image rows apart in scanline mode.
    pub scanline_spacing: usize,
    /// Relative depth jump that marks a discontinuity for the ground truth.
    pub edge_threshold: f64,
    /// Standard deviation of additive input noise in meters (0 disables).
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 64,
            height: 64,
            extent: 12.0,
            min_depth: 2.0,
            max_depth: 60.0,
            walls: (0, 2),
            boxes: (2, 6),
            spheres: (0, 3),
            input_density: 0.05,
            gt_density: 0.3,
            pattern: SparsePattern::Scanline,
            scanline_spacing: 4,
            edge_threshold: 0.05,
            noise_std: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(16) || !self.height.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "image size {}x{} must be a non-zero multiple of 16",
                self.width, self.height
            )));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth <= MAX_PNG_METERS)
        {
            return Err(Error::invalid(format!(
                "depth range ({}, {}] must lie within (0, {MAX_PNG_METERS}]",
                self.min_depth, self.max_depth
            )));
        }
        for (name, d) in [("input", self.input_density), ("gt", self.gt_density)] {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::invalid(format!("{name} density {d} must be in (0, 1)")));
            }
        }
        for (name, (lo, hi)) in [("walls", self.walls), ("boxes", self.boxes), ("spheres", self.spheres)] {
            if lo > hi {
                return Err(Error::invalid(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.scanline_spacing == 0 || !(self.extent > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::invalid("scanline spacing, extent and noise must be positive"));
        }
        Ok(())
    }

    /// Forward camera with the horizon above the image center, so the
    /// lower part of the frame sees the road.
    pub fn camera(&self) -> CameraIntrinsics {
        let f = 0.75 * self.width as f64;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0 - self.height as f64 / 8.0,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Points with `normal . p = offset`.
    Plane { normal: [f64; 3], offset: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Primitive {
    /// Smallest positive ray parameter along `dir` from the origin.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Plane { normal, offset } => {
                let denom = dot(normal, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = offset / denom;
                (t > 0.0).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let a = dot(dir, dir);
                let b = dot(dir, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(b - s) / a, (b + s) / a].into_iter().find(|&t| t > 0.0)
            }
            Primitive::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-12 {
                        if 0.0 < min[k] || 0.0 > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = min[k] / dir[k];
                    let b = max[k] / dir[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 <= 0.0 {
                    return None;
                }
                Some(if t0 > 0.0 { t0 } else { t1 })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Scene { primitives }
    }

    /// Ground, backdrop wall and randomly placed walls, boxes and spheres.
    pub fn random(spec: &SceneSpec, rng: &mut impl Rng) -> Scene {
        let mut prims = vec![
            Primitive::Plane {
                normal: [0.0, 1.0, 0.0],
                offset: CAMERA_HEIGHT,
            },
            Primitive::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: spec.max_depth,
            },
        ];
        let far = spec.min_depth + 0.6 * (spec.max_depth - spec.min_depth);
        for _ in 0..rng.random_range(spec.walls.0..=spec.walls.1) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            prims.push(Primitive::Plane {
                normal: [1.0, 0.0, 0.0],
                offset: side * rng.random_range(0.3 * spec.extent..spec.extent),
            });
        }
        for _ in 0..rng.random_range(spec.boxes.0..=spec.boxes.1) {
            let x = rng.random_range(-spec.extent..spec.extent);
            let z = rng.random_range(spec.min_depth + 2.0..far);
            let (w, h, d) = (
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..3.5),
                rng.random_range(1.0..4.0),
            );
            prims.push(Primitive::Cuboid {
                min: [x - w / 2.0, CAMERA_HEIGHT - h, z],
                max: [x + w / 2.0, CAMERA_HEIGHT, z + d],
            });
        }
        for _ in 0..rng.random_range(spec.spheres.0..=spec.spheres.1) {
            let r = rng.random_range(0.5..2.0);
            let lift = rng.random_range(0.0..1.5);
            prims.push(Primitive::Sphere {
                center: [
                    rng.random_range(-spec.extent..spec.extent),
                    CAMERA_HEIGHT - r - lift,
                    rng.random_range(spec.min_depth + 2.0 + r..far),
                ],
                radius: r,
            });
        }
        Scene::new(prims)
    }

    /// z-depth of the nearest surface through each pixel center; pixels whose
    /// ray hits nothing are invalid. Depth beyond `max_depth` is clipped.
    pub fn render(&self, cam: &CameraIntrinsics, max_depth: f64) -> DepthMap {
        let mut map = DepthMap::empty(cam.width, cam.height, DepthRole::GroundTruth);
        for row in 0..cam.height {
            for col in 0..cam.width {
                // With a unit z component the ray parameter is the z-depth.
                let dir = [
                    (col as f64 - cam.cx) / cam.fx,
                    (row as f64 - cam.cy) / cam.fy,
                    1.0,
                ];
                let hit = self
                    .primitives
                    .iter()
                    .filter_map(|p| p.intersect(dir))
                    .fold(f64::INFINITY, f64::min);
                if hit.is_finite() {
                    map.set(row, col, hit.min(max_depth));
                }
            }
        }
        map
    }
}

/// Renders the random scene for `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<DepthMap> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0);
    Ok(Scene::random(spec, &mut rng).render(&spec.camera(), spec.max_depth))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn valid_indices(map: &DepthMap) -> Vec<usize> {
    (0..map.values().len())
        .filter(|&i| map.values()[i] > 0.0)
        .collect()
}

fn keep_only(map: &DepthMap, keep: impl IntoIterator<Item = usize>, role: DepthRole) -> DepthMap {
    let mut values = vec![0.0; map.values().len()];
    for i in keep {
        values[i] = map.values()[i];
    }
    DepthMap::new(map.width(), map.height(), values, role).expect("subset of a valid map")
}

fn choose(candidates: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = n.min(candidates.len());
    index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|k| candidates[k])
        .collect()
}

/// Keeps `round(density * valid)` of the valid pixels. Scanline mode draws
/// them from evenly spaced rows (spacing shrinks if the rows cannot hold
/// enough pixels).
pub fn sparsify(
    dense: &DepthMap,
    pattern: SparsePattern,
    density: f64,
    spacing: usize,
    seed: u64,
) -> Result<DepthMap> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::invalid(format!("density {density} must be in (0, 1)")));
    }
    let mut rng = stream(seed, 1);
    let valid = valid_indices(dense);
    let n = (density * valid.len() as f64).round() as usize;
    let candidates = match pattern {
        SparsePattern::Uniform => valid,
        SparsePattern::Scanline => {
            let w = dense.width();
            let mut s = spacing.max(1);
            loop {
                let rows: Vec<usize> = valid.iter().copied().filter(|i| (i / w).is_multiple_of(s)).collect();
                if rows.len() >= n || s == 1 {
                    break rows;
                }
                s -= 1;
            }
        }
    };
    Ok(keep_only(dense, choose(&candidates, n, &mut rng), DepthRole::SparseInput))
}

/// Valid pixels whose 8-neighborhood has no relative depth jump above `threshold`.
pub fn smooth_pixels(dense: &DepthMap, threshold: f64) -> Vec<usize> {
    let (w, h) = (dense.width(), dense.height());
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let d = dense.get(row, col);
            if d <= 0.0 {
                continue;
            }
            let mut smooth = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let n = dense.get(r as usize, c as usize);
                    if n <= 0.0 || (n - d).abs() > threshold * d.min(n) {
                        smooth = false;
                    }
                }
            }
            if smooth {
                out.push(row * w + col);
            }
        }
    }
    out
}

/// Semi-dense ground truth: `round(density * pixels)` samples, drawn away
/// from depth discontinuities where possible.
pub fn ground_truth(dense: &DepthMap, density: f64, edge_threshold: f64, seed: u64) -> Result<DepthMap> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::invalid(format!("density {density} must be in (0, 1)")));
    }
    let mut rng = stream(seed, 2);
    let n = (density * dense.values().len() as f64).round() as usize;
    let smooth = smooth_pixels(dense, edge_threshold);
    Ok(keep_only(dense, choose(&smooth, n, &mut rng), DepthRole::GroundTruth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: DepthMap,
    pub gt: DepthMap,
    pub dense: DepthMap,
}

pub fn generate_sample(spec: &SceneSpec) -> Result<SamplePair> {
    let dense = generate_scene(spec)?;
    let mut input = sparsify(
        &dense,
        spec.pattern,
        spec.input_density,
        spec.scanline_spacing,
        spec.seed,
    )?;
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = stream(spec.seed, 3);
        let values = input
            .values()
            .iter()
            .map(|&v| if v > 0.0 { (v + noise.sample(&mut rng)).max(1e-3) } else { 0.0 })
            .collect();
        input = DepthMap::new(input.width(), input.height(), values, DepthRole::SparseInput)?;
    }
    let gt = ground_truth(&dense, spec.gt_density, spec.edge_threshold, spec.seed)?;
    Ok(SamplePair { input, gt, dense })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub input: String,
    pub gt: String,
    pub dense: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Format(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeds for a split: train uses `train_start..train_start + n_train`,
/// val likewise from `val_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train_start: u64,
    pub val_start: u64,
}

impl SplitSeeds {
    /// Validation seeds directly follow the training seeds.
    pub fn contiguous(seed: u64, n_train: usize) -> SplitSeeds {
        SplitSeeds {
            train_start: seed,
            val_start: seed + n_train as u64,
        }
    }
}

/// Writes `<root>/{train,val}/<id>/{input,gt,dense}.png` and `manifest.json`.
pub fn make_split(
    root: &Path,
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    seeds: SplitSeeds,
) -> Result<Manifest> {
    spec.validate()?;
    let train: BTreeSet<u64> = (seeds.train_start..seeds.train_start + n_train as u64).collect();
    if let Some(s) = (seeds.val_start..seeds.val_start + n_val as u64).find(|s| train.contains(s)) {
        return Err(Error::invalid(format!(
            "seed {s} is shared by train and val splits"
        )));
    }
    fs::create_dir_all(root)?;
    let jobs: Vec<(&str, usize, u64)> = (0..n_train)
        .map(|i| ("train", i, seeds.train_start + i as u64))
        .chain((0..n_val).map(|i| ("val", i, seeds.val_start + i as u64)))
        .collect();
    // Samples are pure functions of their seed, so generation order does not matter.
    let encode = |&(split, i, seed): &(&str, usize, u64)| -> Result<(SampleEntry, [Vec<u8>; 3])> {
        let sample = generate_sample(&SceneSpec { seed, ..spec.clone() })?;
        let id = format!("{i:06}");
        let rel = format!("{split}/{id}");
        let entry = SampleEntry {
            id,
            seed,
            input: format!("{rel}/input.png"),
            gt: format!("{rel}/gt.png"),
            dense: format!("{rel}/dense.png"),
        };
        let pngs = [
            write_depth_png(&sample.input)?,
            write_depth_png(&sample.gt)?,
            write_depth_png(&sample.dense)?,
        ];
        Ok((entry, pngs))
    };
    let threads = worker_threads().min(jobs.len()).max(1);
    let chunk = jobs.len().div_ceil(threads).max(1);
    let encoded: Vec<Result<(SampleEntry, [Vec<u8>; 3])>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(encode).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sample worker panicked"))
            .collect()
    });
    let mut manifest = Manifest {
        spec: spec.clone(),
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
    };
    for (item, &(split, _, _)) in encoded.into_iter().zip(&jobs) {
        let (entry, pngs) = item?;
        fs::create_dir_all(root.join(split).join(&entry.id))?;
        for (file, bytes) in [&entry.input, &entry.gt, &entry.dense].into_iter().zip(pngs) {
            fs::write(root.join(file), bytes)?;
        }
        match split {
            "train" => manifest.train.push(entry),
            _ => manifest.val.push(entry),
        }
    }
    fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn read_map(path: PathBuf, role: DepthRole) -> Result<DepthMap> {
    let bytes = fs::read(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    read_depth_png(&bytes, role)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads one sample's PNGs relative to the dataset root.
pub fn load_sample(root: &Path, entry: &SampleEntry) -> Result<SamplePair> {
    Ok(SamplePair {
        input: read_map(root.join(&entry.input), DepthRole::SparseInput)?,
        gt: read_map(root.join(&entry.gt), DepthRole::GroundTruth)?,
        dense: read_map(root.join(&entry.dense), DepthRole::GroundTruth)?,
    })
}
