//! Declarative encoder–decoder plans, the student/teacher builders and the
//! plan interpreter used for every forward pass.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvParams;
use crate::nn::{bridge_hidden, DsdBlock, SharedAttentionBridge, SpatialAttention};
use crate::params::{Binding, Init, ModelParams, ParamSpec};
use crate::tensor::{Shape, Tensor};

/// Number of feature taps used by the mimicry loss.
pub const NUM_TAPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Depthwise-separable dilated conv followed by GELU.
    DsdConv,
    /// Dense K×K conv with bias followed by GELU.
    PlainConv,
    SpatialAttn,
    /// Fuses the skip connection through the shared attention bridge.
    BridgeStage,
    /// Stride-2 depthwise K×K conv without bias.
    Downsample,
    /// Nearest ×2 upsampling then a biased 1×1 conv.
    Upsample,
    /// Biased 1×1 conv producing logits.
    OutputHead,
}

impl LayerKind {
    pub fn short(self) -> &'static str {
        match self {
            LayerKind::DsdConv => "dsd",
            LayerKind::PlainConv => "conv",
            LayerKind::SpatialAttn => "attn",
            LayerKind::BridgeStage => "bridge",
            LayerKind::Downsample => "down",
            LayerKind::Upsample => "up",
            LayerKind::OutputHead => "head",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn new(kind: LayerKind, k: usize, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            kind,
            k,
            c_in,
            c_out,
            dilation: 1,
            stride: 1,
        }
    }

    pub fn dsd(c_in: usize, c_out: usize, dilation: usize) -> Self {
        LayerSpec {
            dilation,
            ..Self::new(LayerKind::DsdConv, 3, c_in, c_out)
        }
    }

    pub fn plain(c_in: usize, c_out: usize) -> Self {
        Self::new(LayerKind::PlainConv, 3, c_in, c_out)
    }

    pub fn attn(c: usize) -> Self {
        Self::new(LayerKind::SpatialAttn, 3, c, c)
    }

    pub fn bridge(c: usize) -> Self {
        Self::new(LayerKind::BridgeStage, 3, c, c)
    }

    pub fn down(c: usize) -> Self {
        LayerSpec {
            stride: 2,
            ..Self::new(LayerKind::Downsample, 3, c, c)
        }
    }

    pub fn up(c_in: usize, c_out: usize) -> Self {
        Self::new(LayerKind::Upsample, 1, c_in, c_out)
    }

    pub fn head(c_in: usize) -> Self {
        Self::new(LayerKind::OutputHead, 1, c_in, 1)
    }

    fn validate(&self, at: &str) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("{at} ({}): {why}", self.kind)));
        if self.k == 0 || self.k % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.c_in == 0 || self.c_out == 0 {
            return bad("channel extents must be positive");
        }
        if self.dilation == 0 || self.stride == 0 {
            return bad("dilation and stride must be >= 1");
        }
        let expect_stride = if self.kind == LayerKind::Downsample { 2 } else { 1 };
        if self.stride != expect_stride {
            return bad("unsupported stride for this layer kind");
        }
        match self.kind {
            LayerKind::SpatialAttn | LayerKind::BridgeStage | LayerKind::Downsample
                if self.c_in != self.c_out =>
            {
                bad("must preserve channel count")
            }
            LayerKind::Upsample | LayerKind::OutputHead if self.k != 1 => bad("must use k = 1"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgePlan {
    pub shared_width: usize,
    pub hidden: usize,
}

/// Encoder stages run in order; decoder stage `i` consumes the skip from
/// encoder stage `i` and runs deepest-first. Every decoder stage starts with
/// an `upsample`, optionally followed by a `bridge_stage` that filters the
/// skip before it is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub name: String,
    pub in_channels: usize,
    pub encoder: Vec<Vec<LayerSpec>>,
    pub decoder: Vec<Vec<LayerSpec>>,
    pub head: LayerSpec,
    #[serde(default)]
    pub bridge: Option<BridgePlan>,
    /// Encoder stage index of each mimicry tap, shallow to deep.
    pub taps: Vec<usize>,
}

/// Width of the channel dimension at every stage boundary, plus the check
/// that the layer chain is consistent.
impl NetworkPlan {
    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn downsamples(&self) -> usize {
        self.encoder
            .iter()
            .flatten()
            .filter(|l| l.kind == LayerKind::Downsample)
            .count()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.encoder[stage].last().map(|l| l.c_out).unwrap_or(self.in_channels)
    }

    /// Output channels of the last decoder stage (or the encoder when there is
    /// no decoder); these pixels feed the contrastive loss.
    pub fn embedding_channels(&self) -> usize {
        self.decoder
            .first()
            .and_then(|s| s.last())
            .map(|l| l.c_out)
            .unwrap_or_else(|| self.stage_channels(self.depth() - 1))
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps.iter().map(|&t| self.stage_channels(t)).collect()
    }

    pub fn tap_resolutions(&self, resolution: usize) -> Vec<usize> {
        let mut res = Vec::with_capacity(self.depth());
        let mut r = resolution;
        for stage in &self.encoder {
            r >>= stage.iter().filter(|l| l.kind == LayerKind::Downsample).count();
            res.push(r);
        }
        self.taps.iter().map(|&t| res[t]).collect()
    }

    /// Prefix of every parameterised layer, in construction order.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        let mut v = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            for (j, l) in stage.iter().enumerate() {
                v.push((format!("enc{i}.{j}.{}", l.kind.short()), *l));
            }
        }
        for i in (0..self.decoder.len()).rev() {
            for (j, l) in self.decoder[i].iter().enumerate() {
                v.push((format!("dec{i}.{j}.{}", l.kind.short()), *l));
            }
        }
        v.push(("head".to_string(), self.head));
        v
    }

    /// Bridge-stage prefixes with channel counts, in stage-index order
    /// (shallowest decoder stage first).
    pub fn bridge_stages(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (i, stage) in self.decoder.iter().enumerate() {
            for (j, l) in stage.iter().enumerate() {
                if l.kind == LayerKind::BridgeStage {
                    v.push((format!("dec{i}.{j}.bridge"), l.c_in));
                }
            }
        }
        v
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Config("plan has no encoder stages".into()));
        }
        if self.taps.len() != NUM_TAPS {
            return Err(Error::Config(format!(
                "plan must define exactly {NUM_TAPS} taps, found {}",
                self.taps.len()
            )));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.depth()) {
            return Err(Error::Config(format!("tap {t} beyond encoder depth {}", self.depth())));
        }
        if self.decoder.len() + 1 != self.depth() && !self.decoder.is_empty() {
            return Err(Error::Config(format!(
                "{} decoder stages for {} encoder stages",
                self.decoder.len(),
                self.depth()
            )));
        }
        let factor = 1usize << self.downsamples();
        if resolution == 0 || resolution % factor != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} is not divisible by {factor}"
            )));
        }
        let mut c = self.in_channels;
        for (i, stage) in self.encoder.iter().enumerate() {
            for (j, l) in stage.iter().enumerate() {
                let at = format!("enc{i}.{j}");
                l.validate(&at)?;
                if l.c_in != c {
                    return Err(Error::Config(format!("{at}: expects {} channels, gets {c}", l.c_in)));
                }
                if matches!(l.kind, LayerKind::BridgeStage | LayerKind::Upsample | LayerKind::OutputHead) {
                    return Err(Error::Config(format!("{at}: {} not allowed in encoder", l.kind)));
                }
                c = l.c_out;
            }
        }
        for i in (0..self.decoder.len()).rev() {
            let stage = &self.decoder[i];
            let skip = self.stage_channels(i);
            match stage.first() {
                Some(l) if l.kind == LayerKind::Upsample => {}
                _ => {
                    return Err(Error::Config(format!("dec{i}: must start with upsample")));
                }
            }
            for (j, l) in stage.iter().enumerate() {
                let at = format!("dec{i}.{j}");
                l.validate(&at)?;
                match l.kind {
                    LayerKind::BridgeStage => {
                        if j != 1 {
                            return Err(Error::Config(format!("{at}: bridge must follow upsample")));
                        }
                        if l.c_in != skip {
                            return Err(Error::Config(format!(
                                "{at}: bridge width {} but skip has {skip}",
                                l.c_in
                            )));
                        }
                        if self.bridge.is_none() {
                            return Err(Error::Config(format!("{at}: plan has no bridge config")));
                        }
                        continue;
                    }
                    LayerKind::Upsample if j != 0 => {
                        return Err(Error::Config(format!("{at}: upsample only at stage start")));
                    }
                    LayerKind::Downsample | LayerKind::OutputHead => {
                        return Err(Error::Config(format!("{at}: {} not allowed in decoder", l.kind)));
                    }
                    _ => {}
                }
                if l.c_in != c {
                    return Err(Error::Config(format!("{at}: expects {} channels, gets {c}", l.c_in)));
                }
                c = l.c_out;
                if l.kind == LayerKind::Upsample && c != skip {
                    return Err(Error::Config(format!(
                        "{at}: upsample yields {c} channels but skip has {skip}"
                    )));
                }
            }
        }
        if self.head.kind != LayerKind::OutputHead {
            return Err(Error::Config("head must be an output_head layer".into()));
        }
        self.head.validate("head")?;
        if self.head.c_in != c {
            return Err(Error::Config(format!("head expects {} channels, gets {c}", self.head.c_in)));
        }
        Ok(())
    }

    /// Every learnable tensor the plan needs, with its initialiser.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if let (Some(b), false) = (self.bridge, self.bridge_stages().is_empty()) {
            specs.extend(SharedAttentionBridge::shared_param_specs("bridge", b.shared_width, b.hidden));
        }
        for (prefix, l) in self.layers() {
            specs.extend(layer_param_specs(&prefix, &l, self.bridge));
        }
        specs
    }
}

fn layer_param_specs(prefix: &str, l: &LayerSpec, bridge: Option<BridgePlan>) -> Vec<ParamSpec> {
    let k = l.k;
    match l.kind {
        LayerKind::DsdConv => DsdBlock::param_specs(prefix, k, l.c_in, l.c_out),
        LayerKind::PlainConv => vec![
            ParamSpec::new(
                format!("{prefix}.w"),
                Shape::new(l.c_out, l.c_in, k, k),
                Init::KaimingUniform {
                    fan_in: l.c_in * k * k,
                },
            ),
            ParamSpec::new(format!("{prefix}.b"), Shape::new(1, l.c_out, 1, 1), Init::Zeros),
        ],
        LayerKind::SpatialAttn => SpatialAttention::param_specs(prefix, l.c_in),
        LayerKind::BridgeStage => {
            let width = bridge.map_or(l.c_in, |b| b.shared_width);
            SharedAttentionBridge::stage_param_specs(prefix, l.c_in, width)
        }
        LayerKind::Downsample => vec![ParamSpec::new(
            format!("{prefix}.dw"),
            Shape::new(l.c_in, 1, k, k),
            Init::LecunUniform { fan_in: k * k },
        )],
        LayerKind::Upsample | LayerKind::OutputHead => vec![
            ParamSpec::new(
                format!("{prefix}.w"),
                Shape::new(l.c_out, l.c_in, 1, 1),
                Init::LecunUniform { fan_in: l.c_in },
            ),
            ParamSpec::new(format!("{prefix}.b"), Shape::new(1, l.c_out, 1, 1), Init::Zeros),
        ],
    }
}

/// Architecture knobs shared by the student and teacher builders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Channel width per encoder stage; its length is the network depth.
    pub widths: Vec<usize>,
    /// Dilation of the main conv in each encoder stage.
    pub dilations: Vec<usize>,
    pub bridge_width: usize,
    pub bridge_reduction: usize,
    /// Encoder stages (counted from the deepest) that carry spatial attention.
    /// `None` means every stage.
    #[serde(default)]
    pub attn_stages: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::student()
    }
}

impl ModelConfig {
    pub fn student() -> Self {
        ModelConfig {
            resolution: 64,
            widths: vec![8, 16, 24, 32, 48],
            dilations: vec![1, 1, 2, 2, 2],
            bridge_width: 16,
            bridge_reduction: 4,
            attn_stages: None,
            seed: 42,
        }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            resolution: 64,
            widths: vec![8, 16, 32, 64, 96],
            dilations: vec![1; 5],
            bridge_width: 32,
            bridge_reduction: 4,
            attn_stages: Some(3),
            seed: 42,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn check(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.dilations.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} dilations for {} stages",
                self.dilations.len(),
                self.widths.len()
            )));
        }
        if self.bridge_width == 0 || self.bridge_reduction == 0 {
            return Err(Error::Config("bridge width and reduction must be positive".into()));
        }
        Ok(())
    }

    fn has_attn(&self, stage: usize) -> bool {
        match self.attn_stages {
            None => true,
            Some(n) => stage + n >= self.widths.len(),
        }
    }

    fn taps(&self) -> Vec<usize> {
        let depth = self.widths.len();
        (0..NUM_TAPS).map(|l| l.min(depth - 1)).collect()
    }

    fn bridge_plan(&self) -> BridgePlan {
        BridgePlan {
            shared_width: self.bridge_width,
            hidden: bridge_hidden(self.bridge_width, self.bridge_reduction),
        }
    }
}

/// A plan together with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub plan: NetworkPlan,
    pub params: ModelParams,
    pub resolution: usize,
}

impl Network {
    /// Fresh parameters for `plan`, initialised from `seed`.
    pub fn from_plan(plan: NetworkPlan, resolution: usize, seed: u64) -> Result<Self> {
        plan.validate(resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::from_specs(&plan.param_specs(), &mut rng)?;
        Ok(Network {
            plan,
            params,
            resolution,
        })
    }

    /// Replaces the parameters after checking names and shapes.
    pub fn with_params(mut self, params: ModelParams) -> Result<Self> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

fn student_plan(cfg: &ModelConfig) -> NetworkPlan {
    let w = &cfg.widths;
    let mut encoder = Vec::new();
    for (i, &c) in w.iter().enumerate() {
        let mut stage = Vec::new();
        let c_prev = if i == 0 { 3 } else { w[i - 1] };
        if i > 0 {
            stage.push(LayerSpec::down(c_prev));
        }
        stage.push(LayerSpec::dsd(c_prev, c, cfg.dilations[i]));
        if cfg.has_attn(i) {
            stage.push(LayerSpec::attn(c));
        }
        encoder.push(stage);
    }
    let decoder = (0..w.len().saturating_sub(1))
        .map(|i| {
            vec![
                LayerSpec::up(w[i + 1], w[i]),
                LayerSpec::bridge(w[i]),
                LayerSpec::dsd(w[i], w[i], 1),
            ]
        })
        .collect();
    NetworkPlan {
        name: "microaunet".into(),
        in_channels: 3,
        encoder,
        decoder,
        head: LayerSpec::head(w[0]),
        bridge: Some(cfg.bridge_plan()),
        taps: cfg.taps(),
    }
}

fn teacher_plan(cfg: &ModelConfig) -> NetworkPlan {
    let w = &cfg.widths;
    let mut encoder = Vec::new();
    for (i, &c) in w.iter().enumerate() {
        let mut stage = Vec::new();
        let c_prev = if i == 0 { 3 } else { w[i - 1] };
        if i > 0 {
            stage.push(LayerSpec::down(c_prev));
        }
        stage.push(LayerSpec::plain(c_prev, c));
        if cfg.has_attn(i) {
            stage.push(LayerSpec::attn(c));
        }
        encoder.push(stage);
    }
    let decoder = (0..w.len().saturating_sub(1))
        .map(|i| {
            vec![
                LayerSpec::up(w[i + 1], w[i]),
                LayerSpec::bridge(w[i]),
                LayerSpec::plain(w[i], w[i]),
            ]
        })
        .collect();
    NetworkPlan {
        name: "teacher".into(),
        in_channels: 3,
        encoder,
        decoder,
        head: LayerSpec::head(w[0]),
        bridge: Some(cfg.bridge_plan()),
        taps: cfg.taps(),
    }
}

/// The light student: depthwise-separable dilated convs, spatial attention in
/// the encoder and the shared attention bridge on every skip.
pub fn build_student(cfg: &ModelConfig) -> Result<Network> {
    cfg.check()?;
    Network::from_plan(student_plan(cfg), cfg.resolution, cfg.seed)
}

/// The wider teacher of the same topology family, using dense convolutions.
pub fn build_teacher(cfg: &ModelConfig) -> Result<Network> {
    cfg.check()?;
    Network::from_plan(teacher_plan(cfg), cfg.resolution, cfg.seed)
}

/// Node ids produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    /// One per tap, shallow to deep.
    pub taps: Vec<NodeId>,
    /// Penultimate decoder features.
    pub embedding: NodeId,
    /// Named spatial attention maps (N×1×H×W), encoder first.
    pub attention: Vec<(String, NodeId)>,
}

/// Runs `plan` inside `g` with parameters from `binding`.
pub fn forward_graph(
    g: &mut Graph,
    plan: &NetworkPlan,
    binding: &Binding,
    x: NodeId,
) -> Result<ForwardNodes> {
    let s = g.shape(x);
    if s.c() != plan.in_channels {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {s}",
            plan.in_channels
        )));
    }
    let bridge = if plan.bridge_stages().is_empty() {
        None
    } else {
        Some(SharedAttentionBridge::bind(binding, "bridge", &plan.bridge_stages())?)
    };
    let mut attention = Vec::new();
    let mut skips = Vec::with_capacity(plan.depth());
    let mut h = x;
    for (i, stage) in plan.encoder.iter().enumerate() {
        for (j, l) in stage.iter().enumerate() {
            let prefix = format!("enc{i}.{j}.{}", l.kind.short());
            h = apply_layer(g, binding, &prefix, l, h, &mut attention)?;
        }
        skips.push(h);
    }
    // Bridge stage indices count bridged decoder stages, shallowest first.
    let mut bridge_of = Vec::with_capacity(plan.decoder.len());
    let mut next = 0;
    for stage in &plan.decoder {
        bridge_of.push(next);
        if stage.iter().any(|l| l.kind == LayerKind::BridgeStage) {
            next += 1;
        }
    }
    for i in (0..plan.decoder.len()).rev() {
        let stage = &plan.decoder[i];
        let mut skip = skips[i];
        let mut fused = false;
        for (j, l) in stage.iter().enumerate() {
            let prefix = format!("dec{i}.{j}.{}", l.kind.short());
            if l.kind == LayerKind::BridgeStage {
                let br = bridge.as_ref().expect("validated plan has a bridge");
                let o = br.forward(g, bridge_of[i], skip)?;
                attention.push((format!("{prefix}.spatial"), o.spatial_attn));
                skip = o.out;
                continue;
            }
            if j > 0 && !fused {
                h = g.add(h, skip)?;
                fused = true;
            }
            h = apply_layer(g, binding, &prefix, l, h, &mut attention)?;
        }
        if !fused {
            h = g.add(h, skip)?;
        }
    }
    let embedding = h;
    let logits = apply_layer(g, binding, "head", &plan.head, h, &mut attention)?;
    let taps = plan.taps.iter().map(|&t| skips[t]).collect();
    Ok(ForwardNodes {
        logits,
        taps,
        embedding,
        attention,
    })
}

fn apply_layer(
    g: &mut Graph,
    b: &Binding,
    prefix: &str,
    l: &LayerSpec,
    x: NodeId,
    attention: &mut Vec<(String, NodeId)>,
) -> Result<NodeId> {
    let id = |name: &str| b.id(&format!("{prefix}.{name}"));
    match l.kind {
        LayerKind::DsdConv => {
            let y = DsdBlock::bind(b, prefix, l.k, l.dilation)?.forward(g, x)?;
            g.gelu(y)
        }
        LayerKind::PlainConv => {
            let y = g.conv2d(x, id("w")?, Some(id("b")?), ConvParams::same(l.k, l.dilation))?;
            g.gelu(y)
        }
        LayerKind::SpatialAttn => {
            let (out, attn) = SpatialAttention::bind(b, prefix)?.forward(g, x, None)?;
            attention.push((prefix.to_string(), attn));
            Ok(out)
        }
        LayerKind::Downsample => {
            let p = ConvParams::new(2, l.dilation * (l.k - 1) / 2, l.dilation);
            g.depthwise_conv2d(x, id("dw")?, None, p)
        }
        LayerKind::Upsample => {
            let u = g.upsample_nearest2x(x)?;
            g.pointwise_conv2d(u, id("w")?, Some(id("b")?))
        }
        LayerKind::OutputHead => g.pointwise_conv2d(x, id("w")?, Some(id("b")?)),
        LayerKind::BridgeStage => Err(Error::Config(format!(
            "{prefix}: bridge_stage outside a decoder stage"
        ))),
    }
}

/// Logits and (optionally) the five tap tensors for input `x`.
pub fn forward(
    plan: &NetworkPlan,
    params: &ModelParams,
    x: &Tensor,
    want_taps: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g, false)?;
    let xi = g.constant(x.clone())?;
    let out = forward_graph(&mut g, plan, &binding, xi)?;
    let taps = if want_taps {
        out.taps.iter().map(|&t| g.take(t)).collect()
    } else {
        Vec::new()
    };
    Ok((g.take(out.logits), taps))
}

/// Every spatial attention map produced for input `x`, encoder first.
pub fn attention_maps(plan: &NetworkPlan, params: &ModelParams, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g, false)?;
    let xi = g.constant(x.clone())?;
    let out = forward_graph(&mut g, plan, &binding, xi)?;
    Ok(out.attention.into_iter().map(|(n, id)| (n, g.take(id))).collect())
}

impl Network {
    /// Checks `x` against the configured resolution before running the plan.
    pub fn forward(&self, x: &Tensor, want_taps: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let s = x.shape();
        if s.h() != self.resolution || s.w() != self.resolution || s.c() != self.plan.in_channels {
            return Err(Error::shape(format!(
                "input {s} does not match {}×{r}×{r}",
                self.plan.in_channels,
                r = self.resolution
            )));
        }
        forward(&self.plan, &self.params, x, want_taps)
    }
}

/// Averages consecutive groups of channels down to `out_channels`. Group `j`
/// covers channels `[j·C/out, (j+1)·C/out)`; equal widths are returned as is.
pub fn project_channels(t: &Tensor, out_channels: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.shape().0;
    if out_channels == 0 || out_channels > c {
        return Err(Error::shape(format!(
            "cannot project {c} channels down to {out_channels}"
        )));
    }
    if out_channels == c {
        let mut copy = t.clone();
        copy.grad = None;
        return Ok(copy);
    }
    let plane = h * w;
    let mut out = vec![0.0; n * out_channels * plane];
    for b in 0..n {
        for j in 0..out_channels {
            let lo = j * c / out_channels;
            let hi = (j + 1) * c / out_channels;
            let dst = &mut out[(b * out_channels + j) * plane..(b * out_channels + j + 1) * plane];
            for ch in lo..hi {
                let src = &t.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            let inv = 1.0 / (hi - lo) as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Tensor::from_vec(Shape::new(n, out_channels, h, w), out)
}
