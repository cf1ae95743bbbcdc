//! Python bindings: depth/error maps, projection, pooling, the network,
//! training on a generated dataset, filtering and metrics.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use errmap::depth::{self, DepthMap, DepthRole, ErrorMap, ErrorRole, PointCloud};
use errmap::eval;
use errmap::net::{self, AleatoricVariant, HeadMode, Network, NetworkConfig};
use errmap::projection::{self, CameraIntrinsics, RigCamera, VirtualRig};
use errmap::synth::{self, SceneSpec};
use errmap::train::{self, Dataset, TrainConfig, TrainOutput};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn depth_role(name: &str) -> PyResult<DepthRole> {
    match name {
        "sparse-input" => Ok(DepthRole::SparseInput),
        "prediction" => Ok(DepthRole::Prediction),
        "ground-truth" => Ok(DepthRole::GroundTruth),
        _ => Err(err(format!(
            "unknown depth role {name:?} (sparse-input, prediction, ground-truth)"
        ))),
    }
}

fn head_mode(name: &str) -> PyResult<HeadMode> {
    match name {
        "error-prediction" => Ok(HeadMode::ErrorPrediction),
        "aleatoric" => Ok(HeadMode::Aleatoric),
        "depth-only" => Ok(HeadMode::DepthOnly),
        _ => Err(err(format!(
            "unknown mode {name:?} (error-prediction, aleatoric, depth-only)"
        ))),
    }
}

/// Depth in meters on a pixel grid; 0 marks a missing pixel.
#[pyclass(name = "DepthMap", module = "errmap_py", from_py_object)]
#[derive(Clone)]
struct PyDepthMap {
    inner: DepthMap,
}

#[pymethods]
impl PyDepthMap {
    #[new]
    #[pyo3(signature = (width, height, values, role = "prediction"))]
    fn new(width: usize, height: usize, values: Vec<f64>, role: &str) -> PyResult<Self> {
        let inner = DepthMap::new(width, height, values, depth_role(role)?).map_err(err)?;
        Ok(PyDepthMap { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, role = "prediction"))]
    fn read_png(path: PathBuf, role: &str) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(err)?;
        let inner = depth::read_depth_png(&bytes, depth_role(role)?).map_err(err)?;
        Ok(PyDepthMap { inner })
    }

    fn write_png(&self, path: PathBuf) -> PyResult<()> {
        let bytes = depth::write_depth_png(&self.inner).map_err(err)?;
        std::fs::write(path, bytes).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major values.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(err(format!("pixel ({row}, {col}) out of range")));
        }
        Ok(self.inner.get(row, col))
    }

    fn valid_count(&self) -> usize {
        self.inner.valid_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "DepthMap({}x{}, {} valid)",
            self.inner.width(),
            self.inner.height(),
            self.inner.valid_count()
        )
    }
}

/// Expected absolute depth error in meters, one per pixel.
#[pyclass(name = "ErrorMap", module = "errmap_py", from_py_object)]
#[derive(Clone)]
struct PyErrorMap {
    inner: ErrorMap,
}

#[pymethods]
impl PyErrorMap {
    #[new]
    fn new(width: usize, height: usize, values: Vec<f64>) -> PyResult<Self> {
        let inner = ErrorMap::new(width, height, values, ErrorRole::Prediction).map_err(err)?;
        Ok(PyErrorMap { inner })
    }

    #[staticmethod]
    fn read_png(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(err)?;
        let inner = depth::read_error_png(&bytes, ErrorRole::Prediction).map_err(err)?;
        Ok(PyErrorMap { inner })
    }

    fn write_png(&self, path: PathBuf) -> PyResult<()> {
        let bytes = depth::write_error_png(&self.inner).map_err(err)?;
        std::fs::write(path, bytes).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("ErrorMap({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Pinhole camera; x right, y down, z forward.
#[pyclass(name = "CameraIntrinsics", module = "errmap_py", from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: CameraIntrinsics,
}

#[pymethods]
impl PyCamera {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(err)?;
        Ok(PyCamera { inner })
    }

    #[staticmethod]
    fn from_fov(fov_deg: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = CameraIntrinsics::from_fov(fov_deg, width, height).map_err(err)?;
        Ok(PyCamera { inner })
    }

    #[getter]
    fn horizontal_fov_deg(&self) -> f64 {
        self.inner.horizontal_fov_deg()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "CameraIntrinsics(fx={}, fy={}, cx={}, cy={}, {}x{})",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height
        )
    }
}

/// Cameras sharing an origin, each turned by a yaw about the vertical axis.
#[pyclass(name = "VirtualRig", module = "errmap_py", from_py_object)]
#[derive(Clone)]
struct PyRig {
    inner: VirtualRig,
}

#[pymethods]
impl PyRig {
    /// `cameras` is a list of `(CameraIntrinsics, yaw_deg)`.
    #[new]
    fn new(cameras: Vec<(PyCamera, f64)>) -> PyResult<Self> {
        let cams = cameras
            .into_iter()
            .map(|(c, yaw)| RigCamera::new(c.inner, yaw))
            .collect();
        Ok(PyRig {
            inner: VirtualRig::new(cams).map_err(err)?,
        })
    }

    #[staticmethod]
    fn five_camera(width: usize, height: usize) -> PyResult<Self> {
        Ok(PyRig {
            inner: VirtualRig::five_camera(width, height).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn covers_full_circle(&self) -> bool {
        self.inner.covers_full_circle()
    }

    fn overlap_deg(&self) -> f64 {
        self.inner.overlap_deg()
    }
}

fn cloud(points: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(err)
}

/// Z-buffered projection of `points` (list of `(x, y, z)`) into a depth map.
#[pyfunction]
fn project(points: Vec<[f64; 3]>, camera: &PyCamera) -> PyResult<PyDepthMap> {
    let (inner, _) = projection::project(&cloud(points)?, &camera.inner);
    Ok(PyDepthMap { inner })
}

/// One point per valid pixel, at the pixel center.
#[pyfunction]
fn backproject(map: &PyDepthMap, camera: &PyCamera) -> Vec<[f64; 3]> {
    projection::backproject(&map.inner, &camera.inner).points().to_vec()
}

#[pyfunction]
fn project_rig(points: Vec<[f64; 3]>, rig: &PyRig) -> PyResult<Vec<PyDepthMap>> {
    Ok(projection::project_rig(&cloud(points)?, &rig.inner)
        .into_iter()
        .map(|(inner, _)| PyDepthMap { inner })
        .collect())
}

/// Rig-frame points with overlap duplicates removed, and the camera each came from.
#[pyfunction]
fn merge_rig(maps: Vec<PyDepthMap>, rig: &PyRig) -> PyResult<(Vec<[f64; 3]>, Vec<usize>)> {
    let maps: Vec<DepthMap> = maps.into_iter().map(|m| m.inner).collect();
    let merged = projection::merge_rig(&maps, None, &rig.inner).map_err(err)?;
    Ok((merged.cloud.points().to_vec(), merged.source))
}

/// Foreground (min) and background (max) of the valid depths in each window.
#[pyfunction]
#[pyo3(signature = (sparse, kernel = 15))]
fn fgbg_pool(sparse: &PyDepthMap, kernel: usize) -> PyResult<(PyDepthMap, PyDepthMap)> {
    let p = errmap::preproc::fgbg_pool(&sparse.inner, kernel).map_err(err)?;
    Ok((
        PyDepthMap {
            inner: p.foreground,
        },
        PyDepthMap {
            inner: p.background,
        },
    ))
}

/// Synthetic `(sparse input, semi-dense ground truth, dense depth)`.
#[pyfunction]
#[pyo3(signature = (seed, width = 64, height = 64))]
fn generate_sample(seed: u64, width: usize, height: usize) -> PyResult<(PyDepthMap, PyDepthMap, PyDepthMap)> {
    let spec = SceneSpec {
        seed,
        width,
        height,
        ..SceneSpec::default()
    };
    let s = synth::generate_sample(&spec).map_err(err)?;
    Ok((
        PyDepthMap { inner: s.input },
        PyDepthMap { inner: s.gt },
        PyDepthMap { inner: s.dense },
    ))
}

/// Writes a train/val dataset with a manifest; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, n_train, n_val, seed = 0, width = 64, height = 64))]
fn make_split(out: PathBuf, n_train: usize, n_val: usize, seed: u64, width: usize, height: usize) -> PyResult<PathBuf> {
    let spec = SceneSpec {
        width,
        height,
        ..SceneSpec::default()
    };
    synth::make_split(&out, &spec, n_train, n_val, synth::SplitSeeds::contiguous(seed, n_train)).map_err(err)?;
    Ok(out.join(synth::MANIFEST_FILE))
}

/// The depth completion network with a depth head and, unless in
/// `depth-only` mode, an error head.
#[pyclass(name = "Network", module = "errmap_py")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (base_channels = 8, mode = "error-prediction", seed = 0, aleatoric_mse = false))]
    fn new(base_channels: usize, mode: &str, seed: u64, aleatoric_mse: bool) -> PyResult<Self> {
        let cfg = NetworkConfig {
            base_channels,
            mode: head_mode(mode)?,
            aleatoric: if aleatoric_mse {
                AleatoricVariant::Mse
            } else {
                AleatoricVariant::Mae
            },
            ..NetworkConfig::default()
        };
        Ok(PyNetwork {
            inner: Network::build(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: net::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        net::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().count()
    }

    /// Dense depth and error map for a sparse depth map of any size.
    fn predict(&self, sparse: &PyDepthMap) -> PyResult<(PyDepthMap, Option<PyErrorMap>)> {
        let cfg = self.inner.config();
        let p = net::predict_padded(&self.inner, &sparse.inner, cfg.scale, cfg.pool_kernel).map_err(err)?;
        Ok((
            PyDepthMap { inner: p.depth },
            p.error.map(|inner| PyErrorMap { inner }),
        ))
    }

    /// Trains in place on the train split of a manifest; returns the
    /// `loss_depth` of every step.
    #[pyo3(signature = (manifest, epochs = 4, batch_size = 2, learning_rate = 1e-3, seed = 0, out = None))]
    fn fit(
        &mut self,
        manifest: PathBuf,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
        out: Option<PathBuf>,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..TrainConfig::default()
        };
        let data = Dataset::load_split(&manifest, "train", self.inner.config()).map_err(err)?;
        let output = out.map(|dir| TrainOutput { dir });
        let (trained, log) = train::train(self.inner.clone(), &cfg, &data, output.as_ref(), |_, _| {}).map_err(err)?;
        self.inner = trained;
        Ok(log.records.iter().map(|r| r.loss_depth).collect())
    }
}

/// Depth metrics over pixels valid in both maps.
#[pyclass(name = "Metrics", module = "errmap_py", get_all)]
struct PyMetrics {
    count: usize,
    rmse_mm: f64,
    mae_mm: f64,
    delta1: f64,
    delta2: f64,
    delta3: f64,
    rel: f64,
    log10: f64,
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!(
            "Metrics(count={}, rmse_mm={:.1}, mae_mm={:.1}, delta1={:.4})",
            self.count, self.rmse_mm, self.mae_mm, self.delta1
        )
    }
}

#[pyfunction]
fn metrics(pred: &PyDepthMap, gt: &PyDepthMap) -> PyResult<PyMetrics> {
    let m = eval::metrics(&pred.inner, &gt.inner).map_err(err)?;
    Ok(PyMetrics {
        count: m.count,
        rmse_mm: m.rmse_mm,
        mae_mm: m.mae_mm,
        delta1: m.delta1,
        delta2: m.delta2,
        delta3: m.delta3,
        rel: m.rel,
        log10: m.log10,
    })
}

/// Keeps pixels with error <= `threshold_mm`; returns the map and keep ratio.
#[pyfunction]
fn filter_by_threshold(pred: &PyDepthMap, err_map: &PyErrorMap, threshold_mm: f64) -> PyResult<(PyDepthMap, f64)> {
    let spec = eval::FilterSpec::from_mm(threshold_mm).map_err(err)?;
    let f = eval::filter_by_threshold(&pred.inner, &err_map.inner, spec).map_err(err)?;
    let ratio = f.keep_ratio();
    Ok((PyDepthMap { inner: f.map }, ratio))
}

/// Smallest threshold in mm that keeps at least `target` of `errors_m`.
#[pyfunction]
fn keep_ratio_to_threshold(errors_m: Vec<f64>, target: f64) -> PyResult<f64> {
    Ok(eval::keep_ratio_to_threshold(&errors_m, target).map_err(err)?.threshold_mm())
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> Option<f64> {
    eval::spearman(&a, &b)
}

/// Largest relative error of a finite-difference check on the tiny network.
#[pyfunction]
#[pyo3(signature = (mode = "error-prediction", seed = 0, eps = 1e-4))]
fn gradcheck(mode: &str, seed: u64, eps: f64) -> PyResult<f64> {
    let cfg = NetworkConfig {
        mode: head_mode(mode)?,
        ..NetworkConfig::tiny()
    };
    Ok(train::gradcheck_network(&cfg, seed, 16, eps).map_err(err)?.max_rel_error)
}

#[pymodule]
fn errmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDepthMap>()?;
    m.add_class::<PyErrorMap>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyRig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(project_rig, m)?)?;
    m.add_function(wrap_pyfunction!(merge_rig, m)?)?;
    m.add_function(wrap_pyfunction!(fgbg_pool, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(make_split, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(filter_by_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(keep_ratio_to_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
