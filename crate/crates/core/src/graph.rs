//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, appends one node holding its result,
//! and returns that node's [`NodeId`]. Inputs always have smaller ids than the
//! node that consumes them, so append order is a topological order and
//! [`Graph::backward`] is a single descending sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvParams};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
/// Probability clamp applied before logarithms in the KL term.
pub const PROB_CLAMP: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: ConvParams,
        depthwise: bool,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    GlobalAvgPool(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Upsample2x(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    L2NormalizeChannels(NodeId),
    BceWithLogits {
        logits: NodeId,
        target: NodeId,
    },
    SoftDice {
        logits: NodeId,
        target: NodeId,
        smooth: f64,
    },
    BernoulliKl {
        student: NodeId,
        teacher: NodeId,
        temperature: f64,
    },
    InfoNce {
        emb: NodeId,
        anchors: Vec<usize>,
        negatives: Vec<usize>,
        temperature: f64,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv {
                depthwise: true, ..
            } => "depthwise_conv2d",
            Op::Conv { .. } => "conv2d",
            Op::Pointwise { .. } => "pointwise_conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Softmax(_) => "softmax_channels",
            Op::LogSoftmax(_) => "log_softmax_channels",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::L2NormalizeChannels(_) => "l2_normalize_channels",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftDice { .. } => "soft_dice",
            Op::BernoulliKl { .. } => "bernoulli_kl",
            Op::InfoNce { .. } => "info_nce",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Pointwise { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Upsample2x(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumSquares(x)
            | Op::L2NormalizeChannels(x) => vec![*x],
            Op::BceWithLogits { logits, target } | Op::SoftDice { logits, target, .. } => {
                vec![*logits, *target]
            }
            Op::BernoulliKl {
                student, teacher, ..
            } => vec![*student, *teacher],
            Op::InfoNce { emb, .. } => vec![*emb],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Iterates the flat indices of `a` and `b` that feed each output element
/// of a broadcast binary op.
fn broadcast_walk(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = a.broadcast_strides(out);
    let sb = b.broadcast_strides(out);
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`, if the node required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Input ids of a node, in operand order.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Detached copy of a node's value.
    pub fn take(&self, id: NodeId) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        t.grad = None;
        t
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Result<NodeId> {
        value.check_finite("leaf")?;
        value.grad = None;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: ConvParams,
    ) -> Result<NodeId> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            p,
            false,
        )?;
        self.push(
            Op::Conv {
                x,
                w,
                b,
                p,
                depthwise: false,
            },
            out,
        )
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        p: ConvParams,
    ) -> Result<NodeId> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            p,
            true,
        )?;
        self.push(
            Op::Conv {
                x,
                w,
                b,
                p,
                depthwise: true,
            },
            out,
        )
    }

    pub fn pointwise_conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = kernels::pointwise_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(Op::Pointwise { x, w, b }, out)
    }

    /// Dense layer on an N×C×1×1 input; weights are shaped `[out, in, 1, 1]`.
    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let s = self.shape(x);
        if s.plane() != 1 {
            return Err(Error::shape(format!(
                "fully_connected expects N×C×1×1 input, got {s}"
            )));
        }
        self.pointwise_conv2d(x, w, b)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, kind: u8) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = Shape::broadcast(sa, sb)
            .ok_or_else(|| Error::shape(format!("cannot broadcast {sa} with {sb}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; out_shape.numel()];
        let f = |x: f64, y: f64| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        if sa == sb {
            for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                *o = f(*x, *y);
            }
        } else {
            broadcast_walk(out_shape, sa, sb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(op, out)
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, 1)
    }

    /// Hadamard product with broadcasting over size-1 axes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), out)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).check_finite("gelu input")?;
        let out = self.value(x).map(gelu_scalar);
        self.push(Op::Gelu(x), out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).check_finite("sigmoid input")?;
        let out = self.value(x).map(sigmoid_scalar);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let data = t
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data)?;
        self.push(Op::GlobalAvgPool(x), out)
    }

    fn channel_softmax(t: &Tensor, log: bool) -> Tensor {
        let [n, c, h, w] = t.shape().0;
        let plane = h * w;
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let lse = log_sum_exp((0..c).map(|ch| d[idx(ch)]));
                for ch in 0..c {
                    let v = d[idx(ch)] - lse;
                    out[idx(ch)] = if log { v } else { v.exp() };
                }
            }
        }
        Tensor::from_vec(t.shape(), out).expect("shape preserved")
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).check_finite("softmax input")?;
        let out = Self::channel_softmax(self.value(x), false);
        self.push(Op::Softmax(x), out)
    }

    pub fn log_softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).check_finite("log_softmax input")?;
        let out = Self::channel_softmax(self.value(x), true);
        self.push(Op::LogSoftmax(x), out)
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().0;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for (pi, src) in t.data().chunks_exact(h * w).enumerate() {
            let dst = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(n, c, oh, ow), out)?;
        self.push(Op::Upsample2x(x), out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean(x), out)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum_squares());
        self.push(Op::SumSquares(x), out)
    }

    /// Divides every pixel's channel vector by its Euclidean norm.
    pub fn l2_normalize_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().0;
        let plane = h * w;
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for p in 0..plane {
                let norm = ((0..c).map(|ch| d[(b * c + ch) * plane + p].powi(2)).sum::<f64>()
                    + NORM_EPS)
                    .sqrt();
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    out[i] = d[i] / norm;
                }
            }
        }
        let out = Tensor::from_vec(t.shape(), out)?;
        self.push(Op::L2NormalizeChannels(x), out)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa} vs {sb}")));
        }
        Ok(())
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `target`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(logits, target, "bce_with_logits")?;
        let (z, t) = (self.value(logits).data(), self.value(target).data());
        let total: f64 = z
            .iter()
            .zip(t)
            .map(|(&z, &t)| z.max(0.0) - z * t + softplus(-z.abs()))
            .sum();
        let out = Tensor::scalar(total / z.len() as f64);
        self.push(Op::BceWithLogits { logits, target }, out)
    }

    fn dice_terms(z: &[f64], t: &[f64], n: usize) -> Vec<(f64, f64)> {
        let per = z.len() / n;
        (0..n)
            .map(|b| {
                let zs = &z[b * per..(b + 1) * per];
                let ts = &t[b * per..(b + 1) * per];
                let mut inter = 0.0;
                let mut total = 0.0;
                for (&zv, &tv) in zs.iter().zip(ts) {
                    let p = sigmoid_scalar(zv);
                    inter += p * tv;
                    total += p + tv;
                }
                (inter, total)
            })
            .collect()
    }

    /// Soft Dice loss `1 - (2I + s)/(P + T + s)` per sample, averaged over the batch.
    pub fn soft_dice(&mut self, logits: NodeId, target: NodeId, smooth: f64) -> Result<NodeId> {
        self.same_shape(logits, target, "soft_dice")?;
        let n = self.shape(logits).n();
        let terms = Self::dice_terms(
            self.value(logits).data(),
            self.value(target).data(),
            n,
        );
        let loss = terms
            .iter()
            .map(|(i, s)| 1.0 - (2.0 * i + smooth) / (s + smooth))
            .sum::<f64>()
            / n as f64;
        self.push(
            Op::SoftDice {
                logits,
                target,
                smooth,
            },
            Tensor::scalar(loss),
        )
    }

    /// Per-pixel Bernoulli KL(teacher || student) on temperature-softened
    /// sigmoid probabilities, averaged over pixels and scaled by `T²`.
    pub fn bernoulli_kl(
        &mut self,
        student: NodeId,
        teacher: NodeId,
        temperature: f64,
    ) -> Result<NodeId> {
        self.same_shape(student, teacher, "bernoulli_kl")?;
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature {temperature} must be > 0")));
        }
        let (zs, zt) = (self.value(student).data(), self.value(teacher).data());
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let total: f64 = zs
            .iter()
            .zip(zt)
            .map(|(&s, &t)| {
                let ps = clamp(sigmoid_scalar(s / temperature));
                let pt = clamp(sigmoid_scalar(t / temperature));
                pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln()
            })
            .sum();
        let out = Tensor::scalar(temperature * temperature * total / zs.len() as f64);
        self.push(
            Op::BernoulliKl {
                student,
                teacher,
                temperature,
            },
            out,
        )
    }

    /// Multi-positive InfoNCE over pixel embeddings.
    ///
    /// `anchors` and `negatives` are flat pixel indices `n * H * W + y * W + x`.
    /// Each anchor's positives are the other anchors. The loss for anchor `i` is
    /// `-ln(Σ_pos e^{s_ip} / (Σ_pos e^{s_ip} + Σ_neg e^{s_in}))` with
    /// `s = <e_i, e_j> / temperature`; the result is the mean over anchors.
    pub fn info_nce(
        &mut self,
        emb: NodeId,
        anchors: Vec<usize>,
        negatives: Vec<usize>,
        temperature: f64,
    ) -> Result<NodeId> {
        let s = self.shape(emb);
        let pixels = s.n() * s.plane();
        if anchors.len() < 2 || negatives.is_empty() {
            return Err(Error::Domain(format!(
                "info_nce needs >= 2 anchors and >= 1 negative, got {} and {}",
                anchors.len(),
                negatives.len()
            )));
        }
        if let Some(&bad) = anchors.iter().chain(&negatives).find(|&&i| i >= pixels) {
            return Err(Error::Index {
                index: bad,
                len: pixels,
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature {temperature} must be > 0")));
        }
        let vecs = gather_pixels(self.value(emb), anchors.iter().chain(&negatives));
        let loss = info_nce_value(&vecs, anchors.len(), temperature);
        self.push(
            Op::InfoNce {
                emb,
                anchors,
                negatives,
                temperature,
            },
            Tensor::scalar(loss),
        )
    }

    /// Populates gradient buffers of every node that requires one, starting
    /// from the scalar `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward from non-scalar node of shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} node {id}",
                    self.nodes[id].op.name()
                )));
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            node.value.grad = if node.requires_grad { g } else { None };
        }
        for node in self.nodes.iter_mut().skip(loss.0 + 1) {
            node.value.grad = None;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |i: NodeId| self.nodes[i.0].requires_grad;
        let numel = |i: NodeId| self.nodes[i.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv {
                x,
                w,
                b,
                p,
                depthwise,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    node.value.shape(),
                    p,
                    depthwise,
                    needs(x),
                );
                self.scatter_conv(x, w, b, cg, grads);
            }
            &Op::Pointwise { x, w, b } => {
                let cg = kernels::pointwise_backward(self.value(x), self.value(w), g, needs(x));
                self.scatter_conv(x, w, b, cg, grads);
            }
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let kind = match node.op {
                    Op::Add(..) => 0,
                    Op::Sub(..) => 1,
                    _ => 2,
                };
                let mut ga = needs(a).then(|| vec![0.0; va.len()]);
                let mut gb = needs(b).then(|| vec![0.0; vb.len()]);
                broadcast_walk(out_shape, sa, sb, |o, ia, ib| {
                    let go = g[o];
                    let (da, db) = match kind {
                        0 => (go, go),
                        1 => (go, -go),
                        _ => (go * vb[ib], go * va[ia]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    add_into(grads, a, &ga);
                }
                if let Some(gb) = gb {
                    add_into(grads, b, &gb);
                }
            }
            &Op::Scale(x, s) => {
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for ((d, gv), xv) in buf.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(*xv);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(y) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            &Op::GlobalAvgPool(x) => {
                let plane = self.shape(x).plane();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for (ch, gv) in buf.chunks_exact_mut(plane).zip(g) {
                        let v = gv / plane as f64;
                        ch.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            &Op::Softmax(x) | &Op::LogSoftmax(x) => {
                let log = matches!(node.op, Op::LogSoftmax(_));
                let [n, c, h, w] = node.value.shape().0;
                let plane = h * w;
                let y = node.value.data();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for b in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + p;
                            if log {
                                let gsum: f64 = (0..c).map(|ch| g[idx(ch)]).sum();
                                for ch in 0..c {
                                    buf[idx(ch)] += g[idx(ch)] - y[idx(ch)].exp() * gsum;
                                }
                            } else {
                                let dot: f64 = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                                for ch in 0..c {
                                    buf[idx(ch)] += y[idx(ch)] * (g[idx(ch)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            &Op::Upsample2x(x) => {
                let [_, _, h, w] = self.shape(x).0;
                let (oh, ow) = (2 * h, 2 * w);
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for (pi, dst) in buf.chunks_exact_mut(h * w).enumerate() {
                        let src = &g[pi * oh * ow..(pi + 1) * oh * ow];
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            &Op::Mean(x) => {
                let v = g[0] / numel(x) as f64;
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    buf.iter_mut().for_each(|d| *d += v);
                });
            }
            &Op::SumSquares(x) => {
                let xv = self.value(x).data();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for (d, xv) in buf.iter_mut().zip(xv) {
                        *d += 2.0 * xv * g[0];
                    }
                });
            }
            &Op::L2NormalizeChannels(x) => {
                let [n, c, h, w] = node.value.shape().0;
                let plane = h * w;
                let xv = self.value(x).data();
                let y = node.value.data();
                accumulate(&mut grads[x.0], numel(x), |buf| {
                    for b in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + p;
                            let norm = ((0..c).map(|ch| xv[idx(ch)].powi(2)).sum::<f64>()
                                + NORM_EPS)
                                .sqrt();
                            let dot: f64 = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                buf[idx(ch)] += (g[idx(ch)] - y[idx(ch)] * dot) / norm;
                            }
                        }
                    }
                });
            }
            &Op::BceWithLogits { logits, target } => {
                let z = self.value(logits).data();
                let t = self.value(target).data();
                let scale = g[0] / z.len() as f64;
                accumulate(&mut grads[logits.0], z.len(), |buf| {
                    for ((d, z), t) in buf.iter_mut().zip(z).zip(t) {
                        *d += scale * (sigmoid_scalar(*z) - t);
                    }
                });
            }
            &Op::SoftDice {
                logits,
                target,
                smooth,
            } => {
                let z = self.value(logits).data();
                let t = self.value(target).data();
                let n = self.shape(logits).n();
                let per = z.len() / n;
                let terms = Self::dice_terms(z, t, n);
                accumulate(&mut grads[logits.0], z.len(), |buf| {
                    for (b, &(inter, total)) in terms.iter().enumerate() {
                        let den = total + smooth;
                        let num = 2.0 * inter + smooth;
                        for i in b * per..(b + 1) * per {
                            let p = sigmoid_scalar(z[i]);
                            let dl_dp = -(2.0 * t[i] * den - num) / (den * den);
                            buf[i] += g[0] / n as f64 * dl_dp * p * (1.0 - p);
                        }
                    }
                });
            }
            &Op::BernoulliKl {
                student,
                teacher,
                temperature,
            } => {
                let zs = self.value(student).data();
                let zt = self.value(teacher).data();
                let scale = g[0] * temperature / zs.len() as f64;
                accumulate(&mut grads[student.0], zs.len(), |buf| {
                    for ((d, s), t) in buf.iter_mut().zip(zs).zip(zt) {
                        let ps_raw = sigmoid_scalar(s / temperature);
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&ps_raw) {
                            continue;
                        }
                        let pt = sigmoid_scalar(t / temperature).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        *d += scale * (ps_raw - pt);
                    }
                });
                // The teacher side is a fixed target; its gradient is not propagated.
            }
            Op::InfoNce {
                emb,
                anchors,
                negatives,
                temperature,
            } => {
                let emb = *emb;
                let t = self.value(emb);
                let vecs = gather_pixels(t, anchors.iter().chain(negatives));
                let gv = info_nce_grad(&vecs, anchors.len(), *temperature);
                let [_, c, h, w] = t.shape().0;
                let plane = h * w;
                accumulate(&mut grads[emb.0], t.numel(), |buf| {
                    for (k, &pix) in anchors.iter().chain(negatives).enumerate() {
                        let (b, p) = (pix / plane, pix % plane);
                        for ch in 0..c {
                            buf[(b * c + ch) * plane + p] += g[0] * gv[k][ch];
                        }
                    }
                });
            }
        }
    }

    fn scatter_conv(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cg: kernels::ConvGrads,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if let Some(gx) = cg.x {
            add_into(grads, x, &gx);
        }
        if self.nodes[w.0].requires_grad {
            add_into(grads, w, &cg.w);
        }
        if let Some(b) = b {
            if self.nodes[b.0].requires_grad {
                add_into(grads, b, &cg.bias);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(d, v)| *d += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn gather_pixels<'a>(t: &Tensor, pixels: impl Iterator<Item = &'a usize>) -> Vec<Vec<f64>> {
    let [_, c, h, w] = t.shape().0;
    let plane = h * w;
    let d = t.data();
    pixels
        .map(|&pix| {
            let (b, p) = (pix / plane, pix % plane);
            (0..c).map(|ch| d[(b * c + ch) * plane + p]).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `vecs[..n_anchor]` are anchors, the rest negatives.
fn info_nce_value(vecs: &[Vec<f64>], n_anchor: usize, temperature: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n_anchor {
        let sims = |range: std::ops::Range<usize>| {
            range
                .filter(move |&j| j != i)
                .map(move |j| dot(&vecs[i], &vecs[j]) / temperature)
        };
        let lse_pos = log_sum_exp(sims(0..n_anchor));
        let lse_all = log_sum_exp(sims(0..vecs.len()));
        total += lse_all - lse_pos;
    }
    total / n_anchor as f64
}

fn info_nce_grad(vecs: &[Vec<f64>], n_anchor: usize, temperature: f64) -> Vec<Vec<f64>> {
    let c = vecs.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; c]; vecs.len()];
    let inv = 1.0 / (n_anchor as f64 * temperature);
    for i in 0..n_anchor {
        let sims: Vec<f64> = (0..vecs.len())
            .map(|j| {
                if j == i {
                    f64::NEG_INFINITY
                } else {
                    dot(&vecs[i], &vecs[j]) / temperature
                }
            })
            .collect();
        let lse_pos = log_sum_exp(sims[..n_anchor].iter().copied());
        let lse_all = log_sum_exp(sims.iter().copied());
        for j in 0..vecs.len() {
            if j == i {
                continue;
            }
            let mut coef = (sims[j] - lse_all).exp();
            if j < n_anchor {
                coef -= (sims[j] - lse_pos).exp();
            }
            let coef = coef * inv;
            for ch in 0..c {
                grads[i][ch] += coef * vecs[j][ch];
                grads[j][ch] += coef * vecs[i][ch];
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::from_vec(Shape(shape), data.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution written independently of the kernels.
    fn conv_oracle(x: &Tensor, w: &Tensor, pad: usize, dil: usize) -> Tensor {
        let [n, c, h, wd] = x.shape().0;
        let [co, _, k, _] = w.shape().0;
        let oh = h + 2 * pad - dil * (k - 1);
        let ow = wd + 2 * pad - dil * (k - 1);
        let mut out = Tensor::zeros(Shape::new(n, co, oh, ow));
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + (ky * dil) as isize - pad as isize;
                                    let ix = xx as isize + (kx * dil) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(o, i, ky, kx) * x.at(b, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    fn identity_kernel(c_out: usize, c_in: usize, depthwise: bool) -> Tensor {
        let mut w = Tensor::zeros(Shape::new(c_out, if depthwise { 1 } else { c_in }, 3, 3));
        for o in 0..c_out {
            let i = if depthwise { 0 } else { o };
            w.set(o, i, 1, 1, 1.0);
        }
        w
    }

    #[test]
    fn conv_all_ones_center_and_corner() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3))).unwrap();
        let w = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3))).unwrap();
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();
        let y = g.conv2d(x, w, Some(b), ConvParams::new(1, 1, 1)).unwrap();
        let out = g.value(y);
        let oracle = conv_oracle(&Tensor::ones(Shape::new(1, 1, 3, 3)), &Tensor::ones(Shape::new(1, 1, 3, 3)), 1, 1);
        assert_eq!(out.at(0, 0, 1, 1), oracle.at(0, 0, 1, 1));
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, 0, y, x), 4.0);
        }
    }

    #[test]
    fn dilated_conv_center() {
        let xs = Tensor::ones(Shape::new(1, 1, 5, 5));
        let ws = Tensor::ones(Shape::new(1, 1, 3, 3));
        let mut g = Graph::new();
        let x = g.constant(xs.clone()).unwrap();
        let w = g.constant(ws.clone()).unwrap();
        let y = g.conv2d(x, w, None, ConvParams::new(1, 2, 2)).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 5, 5));
        assert_eq!(g.value(y).at(0, 0, 2, 2), 9.0);
        assert_eq!(g.value(y).max_abs_diff(&conv_oracle(&xs, &ws, 2, 2)), 0.0);
    }

    #[test]
    fn conv_matches_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = Tensor::randn(Shape::new(2, 3, 7, 6), &mut rng);
        let ws = Tensor::randn(Shape::new(4, 3, 3, 3), &mut rng);
        for (pad, dil) in [(1, 1), (2, 2), (0, 1), (3, 3)] {
            let mut g = Graph::new();
            let x = g.constant(xs.clone()).unwrap();
            let w = g.constant(ws.clone()).unwrap();
            let y = g.conv2d(x, w, None, ConvParams::new(1, pad, dil)).unwrap();
            assert!(g.value(y).max_abs_diff(&conv_oracle(&xs, &ws, pad, dil)) < 1e-12);
        }
    }

    #[test]
    fn strided_output_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(Shape::new(1, 2, 8, 8))).unwrap();
        let w = g.constant(Tensor::ones(Shape::new(2, 1, 3, 3))).unwrap();
        let y = g.depthwise_conv2d(x, w, None, ConvParams::new(2, 1, 1)).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 2, 4, 4));
        // floor((8 + 2 - 2 - 1)/2) + 1 = 4; top-left sees a 2×2 window
        assert_eq!(g.value(y).at(0, 0, 0, 0), 4.0);
        assert_eq!(g.value(y).at(0, 0, 1, 1), 9.0);
    }

    #[test]
    fn identity_kernels_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = Tensor::randn(Shape::new(2, 3, 5, 4), &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xs.clone()).unwrap();
        let w = g.constant(identity_kernel(3, 3, false)).unwrap();
        let y = g.conv2d(x, w, None, ConvParams::same(3, 1)).unwrap();
        assert!(g.value(y).bit_eq(&xs));
        let wd = g.constant(identity_kernel(3, 1, true)).unwrap();
        let y = g.depthwise_conv2d(x, wd, None, ConvParams::same(3, 1)).unwrap();
        assert!(g.value(y).bit_eq(&xs));
        let mut eye = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for i in 0..3 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let we = g.constant(eye).unwrap();
        let y = g.pointwise_conv2d(x, we, None).unwrap();
        assert!(g.value(y).bit_eq(&xs));
    }

    #[test]
    fn depthwise_channel_independence_and_single_channel_agreement() {
        let mut g = Graph::new();
        let mut xs = Tensor::zeros(Shape::new(1, 2, 4, 4));
        for i in 0..16 {
            xs.data_mut()[i] = 1.0;
        }
        let x = g.constant(xs).unwrap();
        let w = g.constant(Tensor::ones(Shape::new(2, 1, 3, 3))).unwrap();
        let y = g.depthwise_conv2d(x, w, None, ConvParams::same(3, 1)).unwrap();
        assert!(g.value(y).batch_item(0).data()[16..].iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = Tensor::randn(Shape::new(2, 1, 6, 6), &mut rng);
        let ws = Tensor::randn(Shape::new(1, 1, 3, 3), &mut rng);
        let x = g.constant(xs).unwrap();
        let w = g.constant(ws).unwrap();
        for p in [ConvParams::same(3, 1), ConvParams::same(3, 2), ConvParams::new(2, 1, 1)] {
            let a = g.depthwise_conv2d(x, w, None, p).unwrap();
            let b = g.conv2d(x, w, None, p).unwrap();
            assert!(g.value(a).bit_eq(g.value(b)));
        }
    }

    #[test]
    fn pointwise_sum_and_conv_agreement() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::randn(Shape::new(1, 2, 3, 3), &mut rng);
        let x = g.constant(xs.clone()).unwrap();
        let w = g.constant(t([1, 2, 1, 1], &[1.0, 1.0])).unwrap();
        let y = g.pointwise_conv2d(x, w, None).unwrap();
        for p in 0..9 {
            let expect = xs.data()[p] + xs.data()[9 + p];
            assert_eq!(g.value(y).data()[p], expect);
        }
        let ws = Tensor::randn(Shape::new(3, 2, 1, 1), &mut rng);
        let bs = Tensor::randn(Shape::new(1, 3, 1, 1), &mut rng);
        let w = g.constant(ws).unwrap();
        let b = g.constant(bs).unwrap();
        let a = g.pointwise_conv2d(x, w, Some(b)).unwrap();
        let c = g.conv2d(x, w, Some(b), ConvParams::new(1, 0, 1)).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(c)) < 1e-15);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 1, 3], &[0.0, -100.0, 100.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] < 1e-20);
        assert_eq!(v[2], 1.0);
        let ge = g.gelu(x).unwrap();
        assert_eq!(g.value(ge).data()[0], 0.0);
    }

    #[test]
    fn broadcast_channel_scaling() {
        let mut g = Graph::new();
        let xs = t([1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let x = g.constant(xs.clone()).unwrap();
        let s = g.constant(Tensor::channel_vector(&[2.0, 3.0])).unwrap();
        let y = g.mul(x, s).unwrap();
        let mut expect = Vec::new();
        for c in 0..2 {
            for i in 0..4 {
                expect.push(xs.data()[c * 4 + i] * [2.0, 3.0][c]);
            }
        }
        assert_eq!(g.value(y).data(), &expect[..]);
        let ones = g.constant(Tensor::ones(xs.shape())).unwrap();
        let y = g.mul(x, ones).unwrap();
        assert!(g.value(y).bit_eq(&xs));
        let zeros = g.constant(Tensor::zeros(xs.shape())).unwrap();
        let y = g.add(x, zeros).unwrap();
        assert!(g.value(y).bit_eq(&xs));
        let bad = g.constant(Tensor::ones(Shape::new(1, 3, 1, 1))).unwrap();
        assert!(matches!(g.add(x, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_and_fc() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).item(), 2.5);
        let c = g.constant(Tensor::full(Shape::new(2, 3, 4, 4), 1.75)).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.75));
        let v = g.constant(t([1, 3, 1, 1], &[0.5, -1.0, 2.0])).unwrap();
        let mut eye = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for i in 0..3 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let w = g.constant(eye).unwrap();
        let y = g.fully_connected(v, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
        assert!(matches!(g.fully_connected(c, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 2, 1, 1], &[0.0, 3f64.ln()])).unwrap();
        let s = g.softmax_channels(x).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        let eq = g.constant(Tensor::full(Shape::new(2, 4, 2, 2), 0.3)).unwrap();
        let s = g.softmax_channels(eq).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ls = g.log_softmax_channels(x).unwrap();
        assert!((g.value(ls).data()[1] - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new(2, 3, 4, 4), 0.7)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(Shape::new(1, 2, 2, 2))).unwrap();
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar_and_preserves_values() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.param(Tensor::randn(Shape::new(1, 2, 3, 3), &mut rng)).unwrap();
        let y = g.gelu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
        let before: Vec<Tensor> = (0..g.len()).map(|i| g.take(NodeId(i))).collect();
        let z = g.mul(y, y).unwrap();
        let l = g.sum(z).unwrap();
        let before_l = g.take(l);
        g.backward(l).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert!(g.value(NodeId(i)).bit_eq(b));
        }
        assert!(g.value(l).bit_eq(&before_l));
    }

    #[test]
    fn nan_is_reported() {
        let mut g = Graph::new();
        let bad = Tensor::from_vec(Shape::SCALAR, vec![f64::NAN]).unwrap();
        assert!(matches!(g.constant(bad), Err(Error::Numeric(_))));
        let x = g.constant(Tensor::full(Shape::SCALAR, 1e300)).unwrap();
        assert!(matches!(g.scale(x, 1e300), Err(Error::Numeric(_))));
    }

    #[test]
    fn info_nce_identical_vectors_closed_form() {
        // 4 anchors, 6 negatives, all embeddings equal: every similarity is the
        // same, so each anchor sees 3 positives out of 9 candidates.
        let emb = Tensor::full(Shape::new(1, 2, 2, 5), std::f64::consts::FRAC_1_SQRT_2);
        let mut g = Graph::new();
        let e = g.constant(emb).unwrap();
        let l = g.info_nce(e, vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8, 9], 0.1).unwrap();
        let expect = (6.0f64 + 4.0 - 1.0).ln() - (4.0f64 - 1.0).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }
}
