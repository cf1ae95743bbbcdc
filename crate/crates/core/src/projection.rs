//! Pinhole projection between point clouds and depth maps, plus a yaw-only
//! rig of virtual cameras that tiles the full circle around a LiDAR.
//!
//! Frames follow the camera convention: x right, y down, z forward. A rig
//! camera with yaw `psi` looks along `(sin psi, 0, cos psi)` in the rig frame.

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthRole, ErrorMap, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the given horizontal field of view and a centered principal point.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::invalid(format!("fov {fov_deg} must be in (0, 180)")));
        }
        let f = width as f64 / (2.0 * (fov_deg.to_radians() / 2.0).tan());
        CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    /// `2 * atan(width / (2 * fx))` in degrees.
    pub fn horizontal_fov_deg(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.fx)).atan().to_degrees()
    }

    /// Nearest pixel `(row, col)` and depth of a camera-frame point, if it is
    /// in front of the camera and inside the image.
    pub fn project_point(&self, p: [f64; 3]) -> Option<(usize, usize, f64)> {
        let [x, y, z] = p;
        if !(z > 0.0) {
            return None;
        }
        let u = (self.fx * x / z + self.cx).round();
        let v = (self.fy * y / z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((v as usize, u as usize, z))
    }

    pub fn backproject_pixel(&self, row: usize, col: usize, depth: f64) -> [f64; 3] {
        [
            (col as f64 - self.cx) * depth / self.fx,
            (row as f64 - self.cy) * depth / self.fy,
            depth,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ProjectionStats {
    /// Points that landed on a pixel (including collision losers).
    pub projected: usize,
    pub dropped_behind: usize,
    pub dropped_outside: usize,
    /// Points discarded because a nearer point took the same pixel.
    pub collisions: usize,
}

impl ProjectionStats {
    pub fn dropped(&self) -> usize {
        self.dropped_behind + self.dropped_outside
    }
}

/// Z-buffered projection; the nearest point wins each pixel.
pub fn project(cloud: &PointCloud, cam: &CameraIntrinsics) -> (DepthMap, ProjectionStats) {
    let mut map = DepthMap::empty(cam.width, cam.height, DepthRole::SparseInput);
    let mut stats = ProjectionStats::default();
    for &p in cloud.points() {
        if !(p[2] > 0.0) {
            stats.dropped_behind += 1;
            continue;
        }
        let Some((row, col, z)) = cam.project_point(p) else {
            stats.dropped_outside += 1;
            continue;
        };
        stats.projected += 1;
        let cur = map.get(row, col);
        if cur > 0.0 {
            stats.collisions += 1;
            if z >= cur {
                continue;
            }
        }
        map.set(row, col, z);
    }
    (map, stats)
}

/// One point per valid pixel, in the camera frame.
pub fn backproject(map: &DepthMap, cam: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::with_capacity(map.valid_count());
    for row in 0..map.height() {
        for col in 0..map.width() {
            let z = map.get(row, col);
            if z > 0.0 {
                points.push(cam.backproject_pixel(row, col, z));
            }
        }
    }
    PointCloud::from_points_unchecked(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub yaw_deg: f64,
}

impl RigCamera {
    pub fn new(intrinsics: CameraIntrinsics, yaw_deg: f64) -> Self {
        RigCamera {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width: intrinsics.width,
            height: intrinsics.height,
            yaw_deg,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        [p[0] * c - p[2] * s, p[1], p[0] * s + p[2] * c]
    }

    pub fn to_rig(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]
    }
}

/// Yaw-only set of pinhole cameras sharing one optical center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualRig {
    pub cameras: Vec<RigCamera>,
}

/// Signed difference `a - b` wrapped into `(-180, 180]`.
fn wrap_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

impl VirtualRig {
    pub fn new(cameras: Vec<RigCamera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("rig needs at least one camera"));
        }
        for cam in &cameras {
            cam.intrinsics().validate()?;
            if !cam.yaw_deg.is_finite() {
                return Err(Error::invalid("rig yaw must be finite"));
            }
        }
        Ok(VirtualRig { cameras })
    }

    /// `count` cameras with equal field of view at evenly spaced yaws from 0.
    pub fn uniform(count: usize, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraIntrinsics::from_fov(fov_deg, width, height)?;
        let step = 360.0 / count.max(1) as f64;
        VirtualRig::new(
            (0..count)
                .map(|i| RigCamera::new(cam, i as f64 * step))
                .collect(),
        )
    }

    /// Five 80-degree cameras around the full circle.
    pub fn five_camera(width: usize, height: usize) -> Result<Self> {
        VirtualRig::uniform(5, 80.0, width, height)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rig: VirtualRig = serde_json::from_str(text)?;
        VirtualRig::new(rig.cameras)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rig serializes")
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn total_fov_deg(&self) -> f64 {
        self.cameras
            .iter()
            .map(|c| c.intrinsics().horizontal_fov_deg())
            .sum()
    }

    /// Measure of yaw angles seen by at least `k` cameras, in degrees.
    pub fn coverage_at_least_deg(&self, k: usize) -> f64 {
        // Sweep interval endpoints over [0, 360), splitting wrapping intervals.
        let mut events: Vec<(f64, i32)> = Vec::new();
        let mut base = 0i32;
        for cam in &self.cameras {
            let half = cam.intrinsics().horizontal_fov_deg() / 2.0;
            if half * 2.0 >= 360.0 {
                base += 1;
                continue;
            }
            let start = (cam.yaw_deg - half).rem_euclid(360.0);
            let end = start + 2.0 * half;
            events.push((start, 1));
            if end <= 360.0 {
                events.push((end, -1));
            } else {
                events.push((360.0, -1));
                events.push((0.0, 1));
                events.push((end - 360.0, -1));
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut depth = base;
        let mut last = 0.0;
        let mut total = 0.0;
        for (angle, delta) in events {
            if depth as usize >= k {
                total += angle - last;
            }
            depth += delta;
            last = angle;
        }
        if depth as usize >= k {
            total += 360.0 - last;
        }
        total
    }

    pub fn covers_full_circle(&self) -> bool {
        (self.coverage_at_least_deg(1) - 360.0).abs() < 1e-9
    }

    /// Angular extent seen by two or more cameras.
    pub fn overlap_deg(&self) -> f64 {
        self.coverage_at_least_deg(2)
    }

    /// Azimuth of a rig-frame point in degrees, measured from camera yaw 0 toward +x.
    pub fn azimuth_deg(p: [f64; 3]) -> f64 {
        p[0].atan2(p[2]).to_degrees()
    }

    /// Camera whose principal axis is angularly closest to `p` among those
    /// that image it; ties go to the lower index.
    pub fn owner(&self, p: [f64; 3]) -> Option<usize> {
        let az = VirtualRig::azimuth_deg(p);
        let mut best: Option<(usize, f64)> = None;
        for (i, cam) in self.cameras.iter().enumerate() {
            if cam.intrinsics().project_point(cam.to_camera(p)).is_none() {
                continue;
            }
            let d = wrap_deg(az - cam.yaw_deg).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Projects the rig-frame cloud into every camera independently.
pub fn project_rig(cloud: &PointCloud, rig: &VirtualRig) -> Vec<(DepthMap, ProjectionStats)> {
    rig.cameras
        .iter()
        .map(|cam| {
            let local = PointCloud::from_points_unchecked(
                cloud.points().iter().map(|&p| cam.to_camera(p)).collect(),
            );
            project(&local, &cam.intrinsics())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedCloud {
    pub cloud: PointCloud,
    /// Per-point error in meters (zeros when no error maps were given).
    pub errors: Vec<f64>,
    /// Camera each kept point came from.
    pub source: Vec<usize>,
    /// Instances dropped because another camera owns the point.
    pub duplicates_removed: usize,
}

/// Back-projects each camera into the rig frame and keeps every point only
/// from the camera whose axis is angularly closest to it.
pub fn merge_rig(
    maps: &[DepthMap],
    errors: Option<&[ErrorMap]>,
    rig: &VirtualRig,
) -> Result<MergedCloud> {
    if maps.len() != rig.len() {
        return Err(Error::invalid(format!(
            "{} depth maps for a rig of {} cameras",
            maps.len(),
            rig.len()
        )));
    }
    if let Some(errs) = errors {
        if errs.len() != rig.len() {
            return Err(Error::invalid(format!(
                "{} error maps for a rig of {} cameras",
                errs.len(),
                rig.len()
            )));
        }
    }
    let mut points = Vec::new();
    let mut point_errors = Vec::new();
    let mut source = Vec::new();
    let mut duplicates_removed = 0;
    for (k, (map, cam)) in maps.iter().zip(&rig.cameras).enumerate() {
        let intr = cam.intrinsics();
        if !map.same_size(intr.width, intr.height) {
            return Err(Error::invalid(format!(
                "camera {k}: map is {}x{}, camera is {}x{}",
                map.width(),
                map.height(),
                intr.width,
                intr.height
            )));
        }
        let err = errors.map(|e| &e[k]);
        for row in 0..map.height() {
            for col in 0..map.width() {
                let z = map.get(row, col);
                if z <= 0.0 {
                    continue;
                }
                let p = cam.to_rig(intr.backproject_pixel(row, col, z));
                if rig.owner(p).is_some_and(|o| o != k) {
                    duplicates_removed += 1;
                    continue;
                }
                points.push(p);
                point_errors.push(err.map_or(0.0, |e| e.get(row, col)));
                source.push(k);
            }
        }
    }
    Ok(MergedCloud {
        cloud: PointCloud::from_points_unchecked(points),
        errors: point_errors,
        source,
        duplicates_removed,
    })
}
