//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` simply walks it in reverse.

use super::conv::{self, ConvGeometry};
use super::{Shape, Tensor4, GUARD_EPS};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Log,
    Square,
    Abs,
    Relu,
    Softplus,
    Scale,
    AddScalar,
    Sum,
    MaskedMean,
    Conv2d,
    TransposeConv2d,
    Concat,
    StopGradient,
}

/// Binary `(batch, 1, height, width)` mask of valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    tensor: Tensor4,
    count: usize,
}

impl ValidityMask {
    pub fn new(tensor: Tensor4) -> Result<Self> {
        if tensor.shape().channels != 1 {
            return Err(Error::InvalidShape {
                op: "ValidityMask",
                detail: format!("mask must have one channel, got {}", tensor.shape()),
            });
        }
        let mut count = 0;
        for &v in tensor.data() {
            if v == 1.0 {
                count += 1;
            } else if v != 0.0 {
                return Err(Error::Domain {
                    op: "ValidityMask",
                    detail: format!("mask entries must be 0 or 1, found {v}"),
                });
            }
        }
        Ok(ValidityMask { tensor, count })
    }

    /// Marks entries with a strictly positive value as valid.
    pub fn from_positive(values: &Tensor4) -> Result<Self> {
        ValidityMask::new(values.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn all_valid(shape: Shape) -> Self {
        let shape = Shape::new(shape.batch, 1, shape.height, shape.width);
        ValidityMask {
            count: shape.numel(),
            tensor: Tensor4::ones(shape),
        }
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_valid(&self, b: usize, h: usize, w: usize) -> bool {
        self.tensor.get(b, 0, h, w) == 1.0
    }

    fn check_covers(&self, op: &'static str, shape: Shape) -> Result<()> {
        let m = self.shape();
        if (m.batch, m.height, m.width) != (shape.batch, shape.height, shape.width) {
            return Err(Error::shape(
                op,
                format!("mask {}x1x{}x{}", shape.batch, shape.height, shape.width),
                format!("mask {m}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div { num: Var, den: Var, guarded: bool },
    Log { x: Var, guarded: bool },
    Square(Var),
    Abs(Var),
    Relu(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    MaskedMean { x: Var, mask: Tensor4, count: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    TransposeConv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Concat(Vec<Var>),
    StopGradient(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Log { .. } => OpKind::Log,
            Op::Square(_) => OpKind::Square,
            Op::Abs(_) => OpKind::Abs,
            Op::Relu(_) => OpKind::Relu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum(_) => OpKind::Sum,
            Op::MaskedMean { .. } => OpKind::MaskedMean,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::TransposeConv2d { .. } => OpKind::TransposeConv2d,
            Op::Concat(_) => OpKind::Concat,
            Op::StopGradient(_) => OpKind::StopGradient,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Div { num, den, .. } => vec![*num, *den],
            Op::Log { x, .. }
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::MaskedMean { x, .. }
            | Op::StopGradient(x) => vec![*x],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::TransposeConv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias.iter().copied());
                p
            }
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor4,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// A graph can optionally be created with frozen stop-gradient values (see
/// [`Graph::with_frozen`]); each `stop_gradient` call then yields the next
/// frozen tensor instead of copying its argument. Finite-difference checks
/// use this to hold the detached branches constant while parameters move.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: Option<Vec<Tensor4>>,
    stops: Vec<Var>,
    branches: u64,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient of the root with respect to a requires-grad leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor4> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor4> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[inline]
fn guard_den(x: f64) -> f64 {
    if x.abs() >= GUARD_EPS {
        x
    } else if x < 0.0 {
        -GUARD_EPS
    } else {
        GUARD_EPS
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Graph whose `stop_gradient` calls return `values` in call order.
    pub fn with_frozen(values: Vec<Tensor4>) -> Self {
        Graph {
            frozen: Some(values),
            ..Graph::default()
        }
    }

    /// Hash of which side of every non-smooth point (ReLU, abs, guard clamps)
    /// each element fell on. Two evaluations with equal signatures took the
    /// same piecewise-smooth branch everywhere.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branches(&mut self, x: Var, class: impl Fn(f64) -> u64) {
        let mut h = self.branches;
        for &v in self.value(x).data() {
            h = (h ^ class(v)).wrapping_mul(0x0100_0000_01b3).rotate_left(5);
        }
        self.branches = h;
    }

    /// Forward values of every stop-gradient node, in creation order.
    pub fn stopped_values(&self) -> Vec<Tensor4> {
        self.stops.iter().map(|&v| self.value(v).clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, op: Op, value: Tensor4) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other.parents().iter().any(|p| self.requires_grad(*p)),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.is_scalar() {
            Ok(sa)
        } else if sa.is_scalar() {
            Ok(sb)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_values(&self, shape: Shape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = shape.numel();
        let data = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        Tensor4::from_vec(shape, data).expect("binary op output length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let value = self.zip_values(shape, a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let value = self.zip_values(shape, a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let value = self.zip_values(shape, a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Division; rejects denominators with magnitude below [`GUARD_EPS`].
    pub fn div(&mut self, num: Var, den: Var) -> Result<Var> {
        let shape = self.binary_shape("div", num, den)?;
        if let Some(bad) = self.value(den).data().iter().find(|d| d.abs() < GUARD_EPS) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("denominator {bad} below guard {GUARD_EPS}"),
            });
        }
        let value = self.zip_values(shape, num, den, |x, y| x / y);
        Ok(self.push(
            Op::Div {
                num,
                den,
                guarded: false,
            },
            value,
        ))
    }

    /// Division with the denominator clamped to `|den| >= GUARD_EPS`.
    pub fn div_guarded(&mut self, num: Var, den: Var) -> Result<Var> {
        let shape = self.binary_shape("div", num, den)?;
        self.note_branches(den, |y| (y.abs() < GUARD_EPS) as u64);
        let value = self.zip_values(shape, num, den, |x, y| x / guard_den(y));
        Ok(self.push(
            Op::Div {
                num,
                den,
                guarded: true,
            },
            value,
        ))
    }

    /// Natural log; rejects non-positive arguments.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(Op::Log { x, guarded: false }, value))
    }

    /// Natural log of `max(x, GUARD_EPS)`.
    pub fn log_guarded(&mut self, x: Var) -> Var {
        self.note_branches(x, |v| (v < GUARD_EPS) as u64);
        let value = self.value(x).map(|v| v.max(GUARD_EPS).ln());
        self.push(Op::Log { x, guarded: true }, value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.note_branches(x, |v| if v > 0.0 { 1 } else if v < 0.0 { 2 } else { 3 });
        let value = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_branches(x, |v| (v > 0.0) as u64);
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus(x), value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        self.push(Op::AddScalar(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor4::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// Mean of `x` over valid mask pixels; the mask is shared across channels.
    pub fn masked_mean(&mut self, x: Var, mask: &ValidityMask) -> Result<Var> {
        let shape = self.shape(x);
        mask.check_covers("masked_mean", shape)?;
        if mask.count() == 0 {
            return Err(Error::EmptyMask("masked_mean"));
        }
        let count = mask.count() * shape.channels;
        let xv = self.value(x);
        let m = mask.tensor();
        let mut total = 0.0;
        for b in 0..shape.batch {
            let mp = m.plane(b, 0);
            for c in 0..shape.channels {
                for (v, w) in xv.plane(b, c).iter().zip(mp) {
                    if *w == 1.0 {
                        total += v;
                    }
                }
            }
        }
        let value = Tensor4::scalar(total / count as f64);
        Ok(self.push(
            Op::MaskedMean {
                x,
                mask: m.clone(),
                count,
            },
            value,
        ))
    }

    /// Sum of squared differences over valid pixels divided by the number of
    /// valid pixels.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: &ValidityMask) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape("masked_mse", sp, st));
        }
        mask.check_covers("masked_mse", sp)?;
        if mask.count() == 0 {
            return Err(Error::EmptyMask("masked_mse"));
        }
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff);
        self.masked_mean(sq, mask)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::conv2d_geometry(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            value,
        ))
    }

    /// Transpose convolution with weights laid out `(in_ch, out_ch, kh, kw)`.
    pub fn transpose_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::transpose_geometry(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let value = conv::transpose_conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        Ok(self.push(
            Op::TransposeConv2d {
                input,
                weight,
                bias,
                geom,
            },
            value,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| Error::invalid("concat_channels of zero parts"))?;
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{}xCx{}x{}", first.batch, first.height, first.width),
                    s,
                ));
            }
            channels += s.channels;
        }
        let shape = Shape::new(first.batch, channels, first.height, first.width);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for &p in parts {
                data.extend_from_slice(self.value(p).item_slice(b));
            }
        }
        let value = Tensor4::from_vec(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// Forward identity that passes no gradient back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = match &self.frozen {
            Some(frozen) => {
                let v = frozen.get(self.stops.len()).ok_or_else(|| {
                    Error::invalid("more stop_gradient calls than frozen values")
                })?;
                if v.shape() != self.shape(x) {
                    return Err(Error::shape("stop_gradient", self.shape(x), v.shape()));
                }
                v.clone()
            }
            None => self.value(x).clone(),
        };
        let var = self.push(Op::StopGradient(x), value);
        self.stops.push(var);
        Ok(var)
    }

    /// Reverse-mode sweep from a scalar root; every requires-grad leaf gets
    /// an entry (zeros when the root does not depend on it).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        if self.requires_grad(root) {
            grads[root.0] = Some(Tensor4::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor4::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4>], target: Var, g: Tensor4) {
        if !self.requires_grad(target) {
            return;
        }
        let g = if self.shape(target).is_scalar() && !g.shape().is_scalar() {
            Tensor4::scalar(g.sum())
        } else {
            g
        };
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn elementwise_grad(&self, g: &Tensor4, x: Var, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
        let xv = self.value(x).data();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| f(gi, if xv.len() == 1 { xv[0] } else { xv[i] }))
            .collect();
        Tensor4::from_vec(g.shape(), data).expect("gradient length")
    }

    fn propagate(&self, op: &Op, out: &Tensor4, g: Tensor4, grads: &mut [Option<Tensor4>]) {
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.elementwise_grad(&g, *b, |gi, bv| gi * bv);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.elementwise_grad(&g, *a, |gi, av| gi * av);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div { num, den, guarded } => {
                let guarded = *guarded;
                if self.requires_grad(*num) {
                    let gn = self.elementwise_grad(&g, *den, |gi, d| {
                        gi / if guarded { guard_den(d) } else { d }
                    });
                    self.accumulate(grads, *num, gn);
                }
                if self.requires_grad(*den) {
                    // d(n/d)/dd = -(n/d)/d, with out = n/d already computed.
                    let dv = self.value(*den).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .enumerate()
                        .map(|(i, (&gi, &q))| {
                            let d = if dv.len() == 1 { dv[0] } else { dv[i] };
                            if guarded && d.abs() < GUARD_EPS {
                                0.0
                            } else {
                                -gi * q / d
                            }
                        })
                        .collect();
                    let gd = Tensor4::from_vec(g.shape(), data).expect("gradient length");
                    self.accumulate(grads, *den, gd);
                }
            }
            Op::Log { x, guarded } => {
                let guarded = *guarded;
                let gx = self.elementwise_grad(&g, *x, |gi, v| {
                    if guarded && v < GUARD_EPS {
                        0.0
                    } else {
                        gi / v
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = self.elementwise_grad(&g, *x, |gi, v| 2.0 * v * gi);
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = self.elementwise_grad(&g, *x, |gi, v| {
                    if v > 0.0 {
                        gi
                    } else if v < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = self.elementwise_grad(&g, *x, |gi, v| if v > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = self.elementwise_grad(&g, *x, |gi, v| gi * sigmoid(v));
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g),
            Op::Sum(x) => {
                let gx = Tensor4::filled(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedMean { x, mask, count } => {
                let shape = self.shape(*x);
                let scale = g.item() / *count as f64;
                let gx = Tensor4::from_fn(shape, |b, _, h, w| mask.get(b, 0, h, w) * scale);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    &g,
                    geom,
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                );
                self.finish_conv(grads, *input, *weight, *bias, dx, dw, db);
            }
            Op::TransposeConv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv::transpose_conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    &g,
                    geom,
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                );
                self.finish_conv(grads, *input, *weight, *bias, dx, dw, db);
            }
            Op::Concat(parts) => {
                let shape = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for b in 0..shape.batch {
                            let item = g.item_slice(b);
                            let start = offset * shape.plane_len();
                            data.extend_from_slice(&item[start..start + ps.item_len()]);
                        }
                        let gp = Tensor4::from_vec(ps, data).expect("concat split");
                        self.accumulate(grads, p, gp);
                    }
                    offset += ps.channels;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_conv(
        &self,
        grads: &mut [Option<Tensor4>],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dx: Option<Tensor4>,
        dw: Option<Tensor4>,
        db: Tensor4,
    ) {
        if let Some(dx) = dx {
            self.accumulate(grads, input, dx);
        }
        if let Some(dw) = dw {
            self.accumulate(grads, weight, dw);
        }
        if let Some(b) = bias {
            let db = Tensor4::from_vec(self.shape(b), db.into_data()).expect("bias gradient");
            self.accumulate(grads, b, db);
        }
    }
}
