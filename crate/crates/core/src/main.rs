//! `errmap` command-line tool. Exit codes: 0 success, 1 failed check,
//! 2 usage or input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use errmap::config::{echo_config, RunConfig};
use errmap::depth::{
    error_colors, read_depth_png, read_error_png, read_lidar_bin, write_depth_png,
    write_error_png, write_ply, DepthMap, DepthRole, ErrorMap, ErrorRole,
};
use errmap::eval::{
    constant_baseline, evaluate_model, filter_by_threshold,
    keep_ratio_to_threshold, mean_depth, metrics, sweep, FilterSpec, Metrics, PixelSet,
    SweepGrid,
};
use errmap::net::loss::Combiner;
use errmap::net::{load_checkpoint, predict_padded, AleatoricVariant, HeadMode, NetworkConfig};
use errmap::projection::{backproject, merge_rig, CameraIntrinsics, VirtualRig};
use errmap::synth::{make_split, SparsePattern, SplitSeeds, MANIFEST_FILE};
use errmap::train::{gradcheck_network, load_split_samples, train, Dataset, TrainOutput, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "errmap", version, about = "Depth completion with learned per-pixel error maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset.
    Synth(SynthArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Predict dense depth and error maps for one sparse depth PNG.
    Predict(PredictArgs),
    /// Drop predicted pixels whose error exceeds a threshold.
    Filter(FilterArgs),
    /// Depth metrics for a model on a dataset split, or for one prediction.
    Eval(EvalArgs),
    /// RMSE and friends as a function of keep ratio.
    Curve(CurveArgs),
    /// Project a LiDAR scan into a camera or a virtual rig.
    Project(ProjectArgs),
    /// Turn depth maps back into a PLY point cloud.
    Backproject(BackprojectArgs),
    /// Finite-difference check of the full training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    ErrorPrediction,
    Aleatoric,
    DepthOnly,
}

impl From<ModeArg> for HeadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ErrorPrediction => HeadMode::ErrorPrediction,
            ModeArg::Aleatoric => HeadMode::Aleatoric,
            ModeArg::DepthOnly => HeadMode::DepthOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum VariantArg {
    Mse,
    Mae,
}

impl From<VariantArg> for AleatoricVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Mse => AleatoricVariant::Mse,
            VariantArg::Mae => AleatoricVariant::Mae,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum PatternArg {
    Scanline,
    Uniform,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    /// First training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// First validation seed (default: right after the training seeds).
    #[arg(long)]
    val_seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    gt_density: Option<f64>,
    #[arg(long, value_enum)]
    pattern: Option<PatternArg>,
    /// Input noise standard deviation in meters.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directory or its manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    aleatoric_variant: Option<VariantArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Fixed loss weights instead of the ratio combiner, e.g. `1,0.5`.
    #[arg(long, value_delimiter = ',')]
    fixed_weights: Option<Vec<f64>>,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sparse depth PNG.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("rule").required(true).args(["threshold_mm", "keep_ratio"])))]
struct FilterArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    err: PathBuf,
    #[arg(long, conflicts_with = "keep_ratio")]
    threshold_mm: Option<f64>,
    /// Target keep ratio in percent.
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Ground truth for metrics on the kept pixels.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CurveArgs {
    #[arg(long, requires = "data", conflicts_with_all = ["pred", "err", "gt"])]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, requires_all = ["err", "gt"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    err: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Keep ratios in percent.
    #[arg(long, value_delimiter = ',', conflicts_with = "thresholds_mm")]
    keep_ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    thresholds_mm: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("optics").required(true).args(["camera", "rig"])))]
struct ProjectArgs {
    /// LiDAR scan of little-endian f32 (x, y, z, reflectance) records.
    #[arg(long)]
    cloud: PathBuf,
    /// Camera intrinsics JSON {fx, fy, cx, cy, width, height}.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Rig JSON {cameras: [{fx, fy, cx, cy, width, height, yaw_deg}]}.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("optics").required(true).args(["camera", "rig"])))]
struct BackprojectArgs {
    /// Depth PNGs, one per rig camera.
    #[arg(long, value_delimiter = ',', required = true)]
    depth: Vec<PathBuf>,
    /// Error PNGs matching `--depth`; colors the cloud by error.
    #[arg(long, value_delimiter = ',')]
    err: Option<Vec<PathBuf>>,
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// Use the tiny network (base 2 channels, 16x16 input).
    #[arg(long, default_value_t = true)]
    tiny: bool,
    #[arg(long, value_enum, default_value = "error-prediction")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    config: &'a RunConfig,
}

fn echo<A: Serialize>(dir: &Path, command: &str, args: &A, config: &RunConfig) -> Result<()> {
    echo_config(
        dir,
        &Echo {
            command,
            args,
            config,
        },
    )
    .with_context(|| format!("cannot write config echo to {}", dir.display()))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_depth(path: &Path, role: DepthRole) -> Result<DepthMap> {
    read_depth_png(&read_file(path)?, role).with_context(|| format!("{}", path.display()))
}

fn read_error(path: &Path) -> Result<ErrorMap> {
    read_error_png(&read_file(path)?, ErrorRole::Prediction).with_context(|| format!("{}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?)
}

fn manifest_path(data: &Path) -> Result<PathBuf> {
    let path = if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    };
    if !path.is_file() {
        bail!("manifest not found at {}", path.display());
    }
    Ok(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}", path.display()))
}

fn cmd_synth(args: &SynthArgs) -> Result<bool> {
    let mut cfg = base_config(args.config.as_deref())?;
    let s = &mut cfg.scene;
    if let Some(v) = args.width {
        s.width = v;
    }
    if let Some(v) = args.height {
        s.height = v;
    }
    if let Some(v) = args.density {
        s.input_density = v;
    }
    if let Some(v) = args.gt_density {
        s.gt_density = v;
    }
    if let Some(p) = args.pattern {
        s.pattern = match p {
            PatternArg::Scanline => SparsePattern::Scanline,
            PatternArg::Uniform => SparsePattern::Uniform,
        };
    }
    if let Some(v) = args.noise {
        s.noise_std = v;
    }
    if let Some(v) = args.seed {
        s.seed = v;
    }
    cfg.out = Some(args.out.clone());
    let seeds = SplitSeeds {
        train_start: cfg.scene.seed,
        val_start: args.val_seed.unwrap_or(cfg.scene.seed + args.train as u64),
    };
    make_split(&args.out, &cfg.scene, args.train, args.val, seeds)
        .with_context(|| format!("cannot write dataset to {}", args.out.display()))?;
    echo(&args.out, "synth", args, &cfg)?;
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(true)
}

#[derive(Serialize)]
struct ValReport {
    samples: usize,
    vs_gt: Option<Metrics>,
    vs_dense: Option<Metrics>,
    constant_baseline: Option<Metrics>,
    spearman_error: Option<f64>,
}

fn cmd_train(args: &TrainArgs) -> Result<bool> {
    let mut cfg = base_config(args.config.as_deref())?;
    if let Some(m) = args.mode {
        cfg.network.mode = m.into();
    }
    if let Some(v) = args.aleatoric_variant {
        cfg.network.aleatoric = v.into();
    }
    if let Some(v) = args.base_channels {
        cfg.network.base_channels = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(w) = &args.fixed_weights {
        t.combiner = Combiner::FixedWeights(w.clone());
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    let data = cfg.data.clone().ok_or_else(|| anyhow!("--data is required"))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    cfg.validate()?;
    let manifest = manifest_path(&data)?;
    let (_, train_samples) = load_split_samples(&manifest, "train")?;
    let (_, val_samples) = load_split_samples(&manifest, "val")?;
    let dataset = Dataset::from_samples(&train_samples, &cfg.network)?;
    echo(&out, "train", args, &cfg)?;
    let net = errmap::net::Network::build(&cfg.network, cfg.train.seed)?;
    let output = TrainOutput { dir: out.clone() };
    let (net, log) = train(net, &cfg.train, &dataset, Some(&output), |_, r| {
        if r.step % 50 == 0 {
            eprintln!(
                "epoch {} step {} loss_depth {:.6} loss_total {:.6}",
                r.epoch, r.step, r.loss_depth, r.loss_total
            );
        }
    })?;
    if log.records.is_empty() {
        // Zero epochs still leave a usable checkpoint.
        errmap::net::save_checkpoint(&net, &out.join(CHECKPOINT_FILE))?;
    }
    if !val_samples.is_empty() {
        let ev = evaluate_model(&net, cfg.network.scale, cfg.network.pool_kernel, &val_samples)?;
        let mean = mean_depth(train_samples.iter().map(|s| &s.gt))?;
        let report = ValReport {
            samples: val_samples.len(),
            vs_gt: ev.vs_gt.report(FilterSpec::unbounded()).metrics,
            vs_dense: ev.vs_dense.report(FilterSpec::unbounded()).metrics,
            constant_baseline: constant_baseline(mean, val_samples.iter().map(|s| &s.gt)).ok(),
            spearman_error: ev.spearman(),
        };
        write_json(&out.join("val_report.json"), &report)?;
    }
    println!("{}", out.join(CHECKPOINT_FILE).display());
    Ok(true)
}

fn cmd_predict(args: &PredictArgs) -> Result<bool> {
    let net = load_checkpoint(&args.model).with_context(|| format!("{}", args.model.display()))?;
    let sparse = read_depth(&args.input, DepthRole::SparseInput)?;
    let cfg = net.config().clone();
    let p = predict_padded(&net, &sparse, cfg.scale, cfg.pool_kernel)?;
    write_file(&args.out.join("depth.png"), write_depth_png(&p.depth)?)?;
    if let Some(e) = &p.error {
        write_file(&args.out.join("error.png"), write_error_png(e)?)?;
    }
    let run = RunConfig {
        network: cfg,
        out: Some(args.out.clone()),
        ..RunConfig::default()
    };
    echo(&args.out, "predict", args, &run)?;
    Ok(true)
}

#[derive(Serialize)]
struct FilterOutput {
    threshold_mm: f64,
    keep_ratio: f64,
    kept: usize,
    candidates: usize,
    metrics: Option<Metrics>,
}

fn cmd_filter(args: &FilterArgs) -> Result<bool> {
    let pred = read_depth(&args.pred, DepthRole::Prediction)?;
    let err = read_error(&args.err)?;
    let spec = match (args.threshold_mm, args.keep_ratio) {
        (Some(t), None) => FilterSpec::from_mm(t)?,
        (None, Some(r)) => {
            let errors: Vec<f64> = pred
                .values()
                .iter()
                .zip(err.values())
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, e)| *e)
                .collect();
            keep_ratio_to_threshold(&errors, r / 100.0)?
        }
        _ => bail!("exactly one of --threshold-mm and --keep-ratio is required"),
    };
    let filtered = filter_by_threshold(&pred, &err, spec)?;
    let metrics = match &args.gt {
        Some(path) => Some(metrics(&filtered.map, &read_depth(path, DepthRole::GroundTruth)?)?),
        None => None,
    };
    write_file(&args.out.join("filtered.png"), write_depth_png(&filtered.map)?)?;
    let report = FilterOutput {
        threshold_mm: spec.threshold_mm(),
        keep_ratio: filtered.keep_ratio(),
        kept: filtered.kept,
        candidates: filtered.candidates,
        metrics,
    };
    write_json(&args.out.join("report.json"), &report)?;
    echo(&args.out, "filter", args, &RunConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(true)
}

/// Predictions of a checkpoint over a split, plus the training-set mean depth.
fn model_pixels(model: &Path, data: &Path, split: &str) -> Result<(RunConfig, errmap::eval::Evaluation, f64, Vec<errmap::synth::SamplePair>)> {
    let net = load_checkpoint(model).with_context(|| format!("{}", model.display()))?;
    let manifest = manifest_path(data)?;
    let (_, samples) = load_split_samples(&manifest, split)?;
    let (_, train_samples) = load_split_samples(&manifest, "train")?;
    let mean = mean_depth(train_samples.iter().map(|s| &s.gt)).unwrap_or(0.0);
    let cfg = net.config().clone();
    let ev = evaluate_model(&net, cfg.scale, cfg.pool_kernel, &samples)?;
    let run = RunConfig {
        network: cfg,
        data: Some(data.to_path_buf()),
        ..RunConfig::default()
    };
    Ok((run, ev, mean, samples))
}

fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    let (report, run) = match (&args.model, &args.data, &args.pred, &args.gt) {
        (Some(model), Some(data), None, None) => {
            let (run, ev, mean, samples) = model_pixels(model, data, &args.split)?;
            let baseline = if mean > 0.0 {
                constant_baseline(mean, samples.iter().map(|s| &s.gt)).ok()
            } else {
                None
            };
            let report = ValReport {
                samples: samples.len(),
                vs_gt: ev.vs_gt.report(FilterSpec::unbounded()).metrics,
                vs_dense: ev.vs_dense.report(FilterSpec::unbounded()).metrics,
                constant_baseline: baseline,
                spearman_error: ev.spearman(),
            };
            (serde_json::to_value(report)?, run)
        }
        (None, _, Some(pred), Some(gt)) => {
            let m = metrics(&read_depth(pred, DepthRole::Prediction)?, &read_depth(gt, DepthRole::GroundTruth)?)?;
            (serde_json::to_value(m)?, RunConfig::default())
        }
        _ => bail!("give either --model with --data, or --pred with --gt"),
    };
    if let Some(out) = &args.out {
        write_json(&out.join("report.json"), &report)?;
        echo(out, "eval", args, &run)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(true)
}

/// Default keep ratios, in percent.
const DEFAULT_KEEP_RATIOS: [f64; 8] = [100.0, 99.995, 99.7, 99.0, 95.0, 90.0, 80.0, 50.0];

fn cmd_curve(args: &CurveArgs) -> Result<bool> {
    let (set, run) = match (&args.model, &args.data, &args.pred) {
        (Some(model), Some(data), None) => {
            let (run, ev, _, _) = model_pixels(model, data, &args.split)?;
            (ev.vs_gt, run)
        }
        (None, _, Some(pred)) => {
            let (err, gt) = (args.err.as_ref().expect("clap"), args.gt.as_ref().expect("clap"));
            let mut set = PixelSet::new();
            set.add_frame(&read_depth(pred, DepthRole::Prediction)?, &read_error(err)?, &read_depth(gt, DepthRole::GroundTruth)?)?;
            (set, RunConfig::default())
        }
        _ => bail!("give either --model with --data, or --pred with --err and --gt"),
    };
    let grid = match (&args.keep_ratios, &args.thresholds_mm) {
        (_, Some(t)) => SweepGrid::ThresholdsMm(t.clone()),
        (Some(r), None) => SweepGrid::KeepRatios(r.iter().map(|v| v / 100.0).collect()),
        (None, None) => SweepGrid::KeepRatios(DEFAULT_KEEP_RATIOS.iter().map(|v| v / 100.0).collect()),
    };
    let curve = sweep(&set, &grid)?;
    if let Some(out) = &args.out {
        write_file(&out.join("curve.json"), curve.to_json())?;
        write_file(&out.join("curve.txt"), curve.to_table())?;
        echo(out, "curve", args, &run)?;
    }
    print!("{}", curve.to_table());
    Ok(true)
}

fn load_optics(camera: Option<&Path>, rig: Option<&Path>) -> Result<VirtualRig> {
    match (camera, rig) {
        (Some(c), None) => {
            let cam: CameraIntrinsics = read_json(c)?;
            cam.validate().with_context(|| format!("{}", c.display()))?;
            Ok(VirtualRig::new(vec![errmap::projection::RigCamera::new(cam, 0.0)])?)
        }
        (None, Some(r)) => {
            let text = fs::read_to_string(r).with_context(|| format!("cannot read {}", r.display()))?;
            VirtualRig::from_json(&text).with_context(|| format!("{}", r.display()))
        }
        _ => bail!("exactly one of --camera and --rig is required"),
    }
}

#[derive(Serialize)]
struct ProjectReport {
    camera: usize,
    file: String,
    valid: usize,
    stats: errmap::projection::ProjectionStats,
}

fn cmd_project(args: &ProjectArgs) -> Result<bool> {
    let cloud = read_lidar_bin(&read_file(&args.cloud)?).with_context(|| format!("{}", args.cloud.display()))?;
    let rig = load_optics(args.camera.as_deref(), args.rig.as_deref())?;
    let mut reports = Vec::new();
    for (k, (map, stats)) in errmap::projection::project_rig(&cloud, &rig).into_iter().enumerate() {
        let file = if args.camera.is_some() {
            "depth.png".to_string()
        } else {
            format!("cam{k}.png")
        };
        write_file(&args.out.join(&file), write_depth_png(&map)?)?;
        reports.push(ProjectReport {
            camera: k,
            file,
            valid: map.valid_count(),
            stats,
        });
    }
    let summary = serde_json::json!({
        "points": cloud.len(),
        "cameras": reports,
        "total_fov_deg": rig.total_fov_deg(),
        "overlap_deg": rig.overlap_deg(),
        "full_circle": rig.covers_full_circle(),
    });
    write_json(&args.out.join("projection.json"), &summary)?;
    echo(&args.out, "project", args, &RunConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn cmd_backproject(args: &BackprojectArgs) -> Result<bool> {
    let rig = load_optics(args.camera.as_deref(), args.rig.as_deref())?;
    let maps = args
        .depth
        .iter()
        .map(|p| read_depth(p, DepthRole::Prediction))
        .collect::<Result<Vec<_>>>()?;
    let errors = match &args.err {
        Some(paths) => Some(paths.iter().map(|p| read_error(p)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let merged = if rig.len() == 1 && errors.is_none() {
        let cam = rig.cameras[0].intrinsics();
        if maps.len() != 1 {
            bail!("{} depth maps for one camera", maps.len());
        }
        let cloud = backproject(&maps[0], &cam);
        errmap::projection::MergedCloud {
            errors: vec![0.0; cloud.len()],
            source: vec![0; cloud.len()],
            cloud,
            duplicates_removed: 0,
        }
    } else {
        merge_rig(&maps, errors.as_deref(), &rig)?
    };
    let colors = errors.as_ref().map(|_| error_colors(&merged.errors));
    write_file(&args.out.join("cloud.ply"), write_ply(&merged.cloud, colors.as_deref())?)?;
    let input_valid: usize = maps.iter().map(|m| m.valid_count()).sum();
    let summary = serde_json::json!({
        "points": merged.cloud.len(),
        "valid_pixels": input_valid,
        "duplicates_removed": merged.duplicates_removed,
    });
    echo(&args.out, "backproject", args, &RunConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let mode: HeadMode = args.mode.into();
    let cfg = if args.tiny {
        NetworkConfig {
            mode,
            ..NetworkConfig::tiny()
        }
    } else {
        bail!("only the tiny network is supported (--tiny)");
    };
    let limit = if mode == HeadMode::Aleatoric { 1e-3 } else { 1e-4 };
    let report = gradcheck_network(&cfg, args.seed, 16, args.eps)?;
    println!(
        "max relative error: {:.3e} (limit {limit:.0e}, checked {}, skipped at kinks {})",
        report.max_rel_error, report.checked, report.skipped
    );
    Ok(report.max_rel_error < limit)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Project(a) => cmd_project(a),
        Command::Backproject(a) => cmd_backproject(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
