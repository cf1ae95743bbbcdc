//! Adam, mini-batching and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::net::loss::{training_losses, Combiner, LossBundle};
use crate::net::{save_checkpoint, HeadMode, Network, NetworkConfig, SIZE_MULTIPLE};
use crate::preproc::{assemble_input, fgbg_pool};
use crate::synth::{load_sample, Manifest, SamplePair};
use crate::tensor::{finite_diff_gradcheck, GradCheckReport, Graph, Shape, Tensor4, ValidityMask, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub combiner: Combiner,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            combiner: Combiner::Ratio,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("learning rate must be > 0 and batch size >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam betas must be in [0, 1) and epsilon > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor4]) -> Self {
        let zeros: Vec<Tensor4> = params.iter().map(|p| Tensor4::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing changes if any gradient is not finite.
pub fn adam_step(
    params: &mut [Tensor4],
    grads: &[Tensor4],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(format!("parameter #{i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Preprocessed samples held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `(1, 3, H, W)` normalized inputs.
    pub inputs: Vec<Tensor4>,
    /// `(1, 1, H, W)` normalized ground truth, 0 where missing.
    pub targets: Vec<Tensor4>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor4,
    pub target: Tensor4,
    pub mask: ValidityMask,
}

impl Dataset {
    pub fn from_pairs(pairs: &[(DepthMap, DepthMap)], cfg: &NetworkConfig) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for (input, gt) in pairs {
            if !gt.same_size(input.width(), input.height()) {
                return Err(Error::invalid("input and ground truth sizes differ"));
            }
            let pooled = fgbg_pool(input, cfg.pool_kernel)?;
            inputs.push(assemble_input(input, &pooled, cfg.scale)?);
            targets.push(gt.to_tensor().map(|v| v / cfg.scale));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn from_samples(samples: &[SamplePair], cfg: &NetworkConfig) -> Result<Dataset> {
        let pairs: Vec<(DepthMap, DepthMap)> = samples
            .iter()
            .map(|s| (s.input.clone(), s.gt.clone()))
            .collect();
        Dataset::from_pairs(&pairs, cfg)
    }

    /// Loads one split (`"train"` or `"val"`) listed in a manifest.
    pub fn load_split(manifest_path: &Path, split: &str, cfg: &NetworkConfig) -> Result<Dataset> {
        let (_, samples) = load_split_samples(manifest_path, split)?;
        Dataset::from_samples(&samples, cfg)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let input = Tensor4::stack(&indices.iter().map(|&i| self.inputs[i].clone()).collect::<Vec<_>>())?;
        let target = Tensor4::stack(&indices.iter().map(|&i| self.targets[i].clone()).collect::<Vec<_>>())?;
        let mask = ValidityMask::from_positive(&target)?;
        Ok(Batch {
            input,
            target,
            mask,
        })
    }

    /// Rejects empty sets, mixed sizes and sizes the network cannot take.
    pub fn check(&self) -> Result<Shape> {
        let first = self
            .inputs
            .first()
            .ok_or_else(|| Error::invalid("dataset is empty"))?
            .shape();
        if first.height % SIZE_MULTIPLE != 0 || first.width % SIZE_MULTIPLE != 0 {
            return Err(Error::invalid(format!(
                "sample size {}x{} is not a multiple of {SIZE_MULTIPLE}",
                first.width, first.height
            )));
        }
        if let Some(t) = self.inputs.iter().find(|t| t.shape() != first) {
            return Err(Error::invalid(format!("mixed sample shapes {first} and {}", t.shape())));
        }
        Ok(first)
    }
}

/// Reads every sample of a split; the manifest directory is the dataset root.
pub fn load_split_samples(manifest_path: &Path, split: &str) -> Result<(Manifest, Vec<SamplePair>)> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = match split {
        "train" => &manifest.train,
        "val" => &manifest.val,
        other => return Err(Error::invalid(format!("unknown split {other}"))),
    };
    let samples = entries
        .iter()
        .map(|e| load_sample(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_depth: f64,
    pub loss_error: Option<f64>,
    pub baseline_depth: Option<f64>,
    pub baseline_error: Option<f64>,
    pub loss_total: f64,
    /// Number of terms in `loss_total`.
    pub active_losses: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<TrainLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(TrainLog { records })
    }
}

/// Loss values, the refreshed error label and gradients for one batch.
#[derive(Clone, Debug)]
pub struct Probe {
    pub loss_depth: f64,
    pub loss_error: Option<f64>,
    pub loss_total: f64,
    pub gt_error: Option<Tensor4>,
    /// Gradient of `loss_total` per parameter.
    pub grad_total: Vec<Tensor4>,
    /// Gradients of each combined loss, in combination order.
    pub grad_terms: Vec<Vec<Tensor4>>,
    /// Values of the combined losses, in the same order.
    pub term_values: Vec<f64>,
}

/// Owns the network and optimizer state between steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    adam: AdamState,
    step: usize,
}

struct Built {
    graph: Graph,
    vars: Vec<Var>,
    losses: LossBundle,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let adam = AdamState::new(net.params().tensors());
        Ok(Trainer {
            net,
            cfg,
            adam,
            step: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn build(&self, batch: &Batch) -> Result<Built> {
        let mut graph = Graph::new();
        let vars = self.net.bind(&mut graph, true);
        let x = graph.constant(batch.input.clone());
        let out = self.net.forward(&mut graph, &vars, x)?;
        let gt = graph.constant(batch.target.clone());
        let cfg = self.net.config();
        let losses = training_losses(
            &mut graph,
            cfg.mode,
            cfg.aleatoric,
            out,
            gt,
            &batch.mask,
            &self.cfg.combiner,
        )?;
        Ok(Built {
            graph,
            vars,
            losses,
        })
    }

    fn grads_of(built: &Built, root: Var) -> Result<Vec<Tensor4>> {
        let mut grads = built.graph.backward(root)?;
        Ok(built
            .vars
            .iter()
            .map(|&v| grads.take(v).expect("parameter gradient"))
            .collect())
    }

    /// Forward, backward and one Adam update.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord> {
        let start = Instant::now();
        let built = self.build(batch)?;
        let grads = Trainer::grads_of(&built, built.losses.total)?;
        adam_step(self.net.params_mut().tensors_mut(), &grads, &mut self.adam, &self.cfg)?;
        self.step += 1;
        let g = &built.graph;
        let l = &built.losses;
        Ok(StepRecord {
            step: self.step,
            epoch,
            loss_depth: g.value(l.loss_depth).item(),
            loss_error: l.loss_error.map(|v| g.value(v).item()),
            baseline_depth: l.baselines.first().map(|&v| g.value(v).item()),
            baseline_error: l.baselines.get(1).map(|&v| g.value(v).item()),
            loss_total: g.value(l.total).item(),
            active_losses: l.active,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Evaluates the objective without updating, with per-term gradients.
    pub fn probe(&self, batch: &Batch) -> Result<Probe> {
        let built = self.build(batch)?;
        let g = &built.graph;
        let l = &built.losses;
        let terms: Vec<Var> = match self.net.config().mode {
            HeadMode::Aleatoric => vec![l.total],
            _ => std::iter::once(l.loss_depth).chain(l.loss_error).collect(),
        };
        let grad_terms = terms
            .iter()
            .map(|&t| Trainer::grads_of(&built, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Probe {
            loss_depth: g.value(l.loss_depth).item(),
            loss_error: l.loss_error.map(|v| g.value(v).item()),
            loss_total: g.value(l.total).item(),
            gt_error: l.gt_error.map(|v| g.value(v).clone()),
            grad_total: Trainer::grads_of(&built, l.total)?,
            grad_terms,
            term_values: terms.iter().map(|&t| g.value(t).item()).collect(),
        })
    }
}

/// Batches of one epoch in a shuffled order fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Where `train` writes checkpoints and its log; `None` keeps everything in memory.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains from `net` for `cfg.epochs` epochs. `on_step` sees every record.
pub fn train(
    net: Network,
    cfg: &TrainConfig,
    data: &Dataset,
    output: Option<&TrainOutput>,
    mut on_step: impl FnMut(&Trainer, &StepRecord),
) -> Result<(Network, TrainLog)> {
    let shape = data.check()?;
    net.check_input(Shape::new(1, 3, shape.height, shape.width))?;
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let mut log = TrainLog::default();
    let mut log_file = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir)?;
            Some(fs::File::create(out.dir.join(LOG_FILE))?)
        }
        None => None,
    };
    for epoch in 0..cfg.epochs {
        for indices in epoch_order(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let record = trainer.step(&data.batch(&indices)?, epoch)?;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            on_step(&trainer, &record);
            log.records.push(record);
        }
        if let Some(out) = output {
            save_checkpoint(trainer.network(), &out.dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok((trainer.into_network(), log))
}

/// Central-difference check of the whole training objective on a tiny
/// random problem. Biases are randomized so no ReLU sits exactly at its kink.
pub fn gradcheck_network(cfg: &NetworkConfig, seed: u64, size: usize, eps: f64) -> Result<GradCheckReport> {
    let mut net = Network::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let names = net.params().names().to_vec();
    for (name, t) in names.iter().zip(net.params_mut().tensors_mut()) {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    let shape = Shape::new(1, 1, size, size);
    let mut sparse = Tensor4::zeros(shape);
    let mut gt = Tensor4::zeros(shape);
    for i in 0..shape.numel() {
        if rng.random_bool(0.3) {
            sparse.data_mut()[i] = rng.random_range(2.0..60.0);
        }
        if rng.random_bool(0.5) {
            gt.data_mut()[i] = rng.random_range(2.0..60.0);
        }
    }
    let sparse = DepthMap::from_tensor(&sparse, 0, 0, crate::depth::DepthRole::SparseInput);
    let gt = gt.map(|v| v / cfg.scale);
    let input = assemble_input(&sparse, &fgbg_pool(&sparse, cfg.pool_kernel)?, cfg.scale)?;
    let mask = ValidityMask::from_positive(&gt)?;
    let combiner = Combiner::Ratio;
    finite_diff_gradcheck(
        |g, vars| {
            let x = g.constant(input.clone());
            let out = net.forward(g, vars, x)?;
            let target = g.constant(gt.clone());
            Ok(training_losses(g, cfg.mode, cfg.aleatoric, out, target, &mask, &combiner)?.total)
        },
        net.params().tensors(),
        eps,
    )
}
