//! Encoder-decoder depth completion network with a depth head and an
//! error head on a shared feature trunk.

mod checkpoint;
pub mod loss;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthRole, ErrorMap, ErrorRole};
use crate::error::{Error, Result};
use crate::preproc::{fgbg_pool, assemble_input, DEFAULT_KERNEL, DEFAULT_SCALE_M};
use crate::tensor::{Graph, Shape, Tensor4, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    aleatoric_loss, error_ground_truth, fixed_combine, loss_depth, loss_error, ratio_combine,
    Combined, RATIO_GUARD,
};

/// Number of stride-2 stages; inputs must be divisible by `2^STAGES`.
pub const STAGES: usize = 4;
pub const SIZE_MULTIPLE: usize = 1 << STAGES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Depth head plus a softplus error head trained on the live residual.
    ErrorPrediction,
    /// Error head predicts an uncertainty trained with the likelihood loss.
    Aleatoric,
    DepthOnly,
}

/// Likelihood used in aleatoric mode. The softplus head output is the
/// variance for `Mse` and the Laplace scale for `Mae`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AleatoricVariant {
    Mse,
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub trunk_channels: usize,
    /// Conv layers per head; the last one maps to a single channel.
    pub head_depth: usize,
    pub head_channels: usize,
    pub mode: HeadMode,
    pub aleatoric: AleatoricVariant,
    /// Input depths are divided by this many meters.
    pub scale: f64,
    pub pool_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 8,
            trunk_channels: 32,
            head_depth: 2,
            head_channels: 16,
            mode: HeadMode::ErrorPrediction,
            aleatoric: AleatoricVariant::Mae,
            scale: DEFAULT_SCALE_M,
            pool_kernel: DEFAULT_KERNEL,
        }
    }
}

impl NetworkConfig {
    /// Smallest sensible network, for gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            base_channels: 2,
            trunk_channels: 4,
            head_depth: 2,
            head_channels: 3,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.trunk_channels == 0 || self.head_channels == 0 {
            return Err(Error::invalid("channel counts must be > 0"));
        }
        if self.head_depth == 0 {
            return Err(Error::invalid("head depth must be >= 1"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("scale {} must be > 0", self.scale)));
        }
        if self.pool_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("pool kernel {} must be odd", self.pool_kernel)));
        }
        Ok(())
    }

    pub fn has_error_head(&self) -> bool {
        self.mode != HeadMode::DepthOnly
    }

    /// Channels at encoder level `k` (0 is the stem): doubling, capped at 8x base.
    pub fn level_channels(&self, k: usize) -> usize {
        (self.base_channels << k).min(8 * self.base_channels)
    }

    /// Names and shapes of every trainable tensor, in parameter order.
    pub fn layout(&self) -> Vec<(String, Shape)> {
        let conv = |o, i, k| Shape::new(o, i, k, k);
        let bias = |o| Shape::new(1, o, 1, 1);
        let mut out = Vec::new();
        let mut push = |name: String, w: Shape, o: usize| {
            out.push((format!("{name}.w"), w));
            out.push((format!("{name}.b"), bias(o)));
        };
        let c0 = self.level_channels(0);
        push("stem".into(), conv(c0, 3, 3), c0);
        for k in 1..=STAGES {
            let (i, o) = (self.level_channels(k - 1), self.level_channels(k));
            push(format!("enc{k}.conv1"), conv(o, i, 3), o);
            push(format!("enc{k}.conv2"), conv(o, o, 3), o);
        }
        let mut ch = self.level_channels(STAGES);
        for j in 1..=STAGES {
            let o = self.level_channels(STAGES - j);
            // Transpose-conv weights are (in, out, kh, kw).
            push(format!("dec{j}.up"), Shape::new(ch, o, 4, 4), o);
            ch = 2 * o;
        }
        push("trunk".into(), conv(self.trunk_channels, ch, 3), self.trunk_channels);
        let mut heads = vec!["depth"];
        if self.has_error_head() {
            heads.push("error");
        }
        for head in heads {
            let mut i = self.trunk_channels;
            for l in 0..self.head_depth {
                let o = if l + 1 == self.head_depth { 1 } else { self.head_channels };
                push(format!("{head}.conv{l}"), conv(o, i, 3), o);
                i = o;
            }
        }
        out
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor4>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn new(entries: Vec<(String, Tensor4)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("parameter {name} has non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Parameters {
            names,
            tensors,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor4] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor4] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor4::len).sum()
    }
}

/// Graph handles of the two heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub depth: Var,
    pub error: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Parameters,
}

impl Network {
    /// He-initialized weights and zero biases. Each tensor draws from its own
    /// stream keyed by name, so shared layers match across head modes.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".b") {
                    Tensor4::zeros(shape)
                } else {
                    // Transpose-conv fan-in is in_ch * k * k / stride^2; conv is in_ch * k * k.
                    let fan_in = if name.contains(".up") {
                        shape.batch * shape.height * shape.width / 4
                    } else {
                        shape.channels * shape.height * shape.width
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(name_stream(&name));
                    let data = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor4::from_vec(shape, data).expect("layout shape")
                };
                (name, t)
            })
            .collect();
        Ok(Network {
            config: config.clone(),
            params: Parameters::new(entries)?,
        })
    }

    /// Wraps existing parameters after checking them against the config layout.
    pub fn from_parameters(config: &NetworkConfig, params: Parameters) -> Result<Network> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "config expects {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, t)) in layout.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != have || *shape != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {have} {} does not match expected {name} {shape}",
                    t.shape()
                )));
            }
        }
        Ok(Network {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Adds every tensor to the graph as a trainable leaf or a constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels != 3 {
            return Err(Error::InvalidShape {
                op: "forward",
                detail: format!("input must have 3 channels, got {shape}"),
            });
        }
        if shape.height == 0
            || shape.width == 0
            || !shape.height.is_multiple_of(SIZE_MULTIPLE)
            || !shape.width.is_multiple_of(SIZE_MULTIPLE)
        {
            return Err(Error::InvalidShape {
                op: "forward",
                detail: format!("spatial size of {shape} must be a non-zero multiple of {SIZE_MULTIPLE}"),
            });
        }
        Ok(())
    }

    /// Builds the forward graph from `input` using `vars` in parameter order.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<HeadOutputs> {
        self.check_input(g.shape(input))?;
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let p = |name: &str| vars[self.params.position(name).expect("layout name")];
        let conv = |g: &mut Graph, x: Var, name: &str, stride: usize, relu: bool| -> Result<Var> {
            let y = g.conv2d(x, p(&format!("{name}.w")), Some(p(&format!("{name}.b"))), stride, 1)?;
            Ok(if relu { g.relu(y) } else { y })
        };

        let mut features = vec![conv(g, input, "stem", 1, true)?];
        for k in 1..=STAGES {
            let x = *features.last().expect("stem");
            let h = conv(g, x, &format!("enc{k}.conv1"), 2, true)?;
            let h = conv(g, h, &format!("enc{k}.conv2"), 1, false)?;
            let skip = self.shortcut(g, x, self.config.level_channels(k))?;
            let sum = g.add(h, skip)?;
            features.push(g.relu(sum));
        }
        let mut x = features[STAGES];
        for j in 1..=STAGES {
            let up = g.transpose_conv2d(
                x,
                p(&format!("dec{j}.up.w")),
                Some(p(&format!("dec{j}.up.b"))),
                2,
                1,
            )?;
            let up = g.relu(up);
            x = g.concat_channels(&[up, features[STAGES - j]])?;
        }
        let trunk = conv(g, x, "trunk", 1, true)?;
        let head = |g: &mut Graph, name: &str| -> Result<Var> {
            let mut h = trunk;
            for l in 0..self.config.head_depth {
                h = conv(g, h, &format!("{name}.conv{l}"), 1, l + 1 < self.config.head_depth)?;
            }
            Ok(h)
        };
        let depth = head(g, "depth")?;
        let error = if self.config.has_error_head() {
            let raw = head(g, "error")?;
            Some(g.softplus(raw))
        } else {
            None
        };
        Ok(HeadOutputs { depth, error })
    }

    /// Strided identity: keeps every second pixel and zero-fills new channels.
    fn shortcut(&self, g: &mut Graph, x: Var, out_ch: usize) -> Result<Var> {
        let in_ch = g.shape(x).channels;
        let w = Tensor4::from_fn(Shape::new(out_ch, in_ch, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        });
        let w = g.constant(w);
        g.conv2d(x, w, None, 2, 0)
    }

    /// Forward pass on a normalized `(B, 3, H, W)` input without gradients.
    pub fn infer_tensor(&self, input: &Tensor4) -> Result<(Tensor4, Option<Tensor4>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok((
            g.value(out.depth).clone(),
            out.error.map(|e| g.value(e).clone()),
        ))
    }
}

/// Anything that maps a normalized `(1, 3, H, W)` input to depth and an
/// optional error channel in the same normalized units.
pub trait DepthModel {
    fn infer(&self, input: &Tensor4) -> Result<(Tensor4, Option<Tensor4>)>;

    /// Spatial dims must be a multiple of this.
    fn size_multiple(&self) -> usize {
        1
    }

    /// Converts the normalized error channel to meters.
    fn error_to_meters(&self, e: f64, scale: f64) -> f64 {
        e * scale
    }
}

impl DepthModel for Network {
    fn infer(&self, input: &Tensor4) -> Result<(Tensor4, Option<Tensor4>)> {
        self.infer_tensor(input)
    }

    fn size_multiple(&self) -> usize {
        SIZE_MULTIPLE
    }

    fn error_to_meters(&self, e: f64, scale: f64) -> f64 {
        match (self.config.mode, self.config.aleatoric) {
            // The head is a variance in normalized units.
            (HeadMode::Aleatoric, AleatoricVariant::Mse) => e.sqrt() * scale,
            _ => e * scale,
        }
    }
}

/// Dense depth and, when the model has an error head, its error map.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub depth: DepthMap,
    pub error: Option<ErrorMap>,
}

/// Pools, normalizes by `scale`, runs the model and converts back to meters.
pub fn predict<M: DepthModel + ?Sized>(
    model: &M,
    sparse: &DepthMap,
    scale: f64,
    kernel: usize,
) -> Result<Prediction> {
    let m = model.size_multiple();
    if !sparse.width().is_multiple_of(m) || !sparse.height().is_multiple_of(m) {
        return Err(Error::InvalidShape {
            op: "predict",
            detail: format!(
                "{}x{} is not a multiple of {m}; use predict_padded",
                sparse.width(),
                sparse.height()
            ),
        });
    }
    let pooled = fgbg_pool(sparse, kernel)?;
    let input = assemble_input(sparse, &pooled, scale)?;
    let (depth, error) = model.infer(&input)?;
    let depth = DepthMap::from_tensor(&depth.map(|v| v * scale), 0, 0, DepthRole::Prediction);
    let error = error.map(|e| {
        ErrorMap::from_tensor(&e.map(|v| model.error_to_meters(v, scale)), 0, 0, ErrorRole::Prediction)
    });
    Ok(Prediction { depth, error })
}

/// Like [`predict`] for any size: zero-pads right and bottom up to the
/// model multiple and crops the outputs back.
pub fn predict_padded<M: DepthModel + ?Sized>(
    model: &M,
    sparse: &DepthMap,
    scale: f64,
    kernel: usize,
) -> Result<Prediction> {
    let m = model.size_multiple();
    let (w, h) = (sparse.width(), sparse.height());
    let (pw, ph) = (w.div_ceil(m).max(1) * m, h.div_ceil(m).max(1) * m);
    if (pw, ph) == (w, h) {
        return predict(model, sparse, scale, kernel);
    }
    let mut padded = DepthMap::empty(pw, ph, sparse.role());
    for row in 0..h {
        for col in 0..w {
            padded.set(row, col, sparse.get(row, col));
        }
    }
    let out = predict(model, &padded, scale, kernel)?;
    let crop = |v: &[f64]| -> Vec<f64> {
        (0..h).flat_map(|row| v[row * pw..row * pw + w].to_vec()).collect()
    };
    Ok(Prediction {
        depth: DepthMap::new(w, h, crop(out.depth.values()), DepthRole::Prediction)?,
        error: match out.error {
            Some(e) => Some(ErrorMap::new(w, h, crop(e.values()), ErrorRole::Prediction)?),
            None => None,
        },
    })
}
