//! Architectural building blocks: the depthwise-separable dilated
//! convolution, the single-path spatial attention and the parameter-shared
//! channel–spatial attention bridge.
//!
//! Blocks hold [`NodeId`]s of weights already bound into a [`Graph`]; build
//! them with `bind` from a [`Binding`] and a name prefix. The matching
//! `param_specs` functions list the tensors each block expects.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvParams;
use crate::params::{Binding, Init, ParamSpec};
use crate::tensor::{Shape, Tensor};

/// Kernel size of the depthwise conv inside the spatial attention path.
pub const ATTN_KERNEL: usize = 3;
/// Initial value of the bridge mixing weights.
pub const BRIDGE_MIX_INIT: f64 = 0.5;

fn kaiming(fan_in: usize) -> Init {
    Init::KaimingUniform { fan_in }
}

/// Depthwise (optionally dilated) K×K convolution followed by a biased 1×1
/// convolution.
#[derive(Clone, Debug)]
pub struct DsdBlock {
    pub dw: NodeId,
    pub pw: NodeId,
    pub pw_bias: NodeId,
    pub kernel: usize,
    pub dilation: usize,
}

impl DsdBlock {
    pub fn param_specs(prefix: &str, kernel: usize, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                format!("{prefix}.dw"),
                Shape::new(c_in, 1, kernel, kernel),
                Init::LecunUniform {
                    fan_in: kernel * kernel,
                },
            ),
            ParamSpec::new(format!("{prefix}.pw"), Shape::new(c_out, c_in, 1, 1), kaiming(c_in)),
            ParamSpec::new(format!("{prefix}.pw_bias"), Shape::new(1, c_out, 1, 1), Init::Zeros),
        ]
    }

    /// `K·K·C_in + C_in·C_out + C_out`.
    pub fn param_count(kernel: usize, c_in: usize, c_out: usize) -> usize {
        kernel * kernel * c_in + c_in * c_out + c_out
    }

    pub fn bind(b: &Binding, prefix: &str, kernel: usize, dilation: usize) -> Result<Self> {
        Ok(DsdBlock {
            dw: b.id(&format!("{prefix}.dw"))?,
            pw: b.id(&format!("{prefix}.pw"))?,
            pw_bias: b.id(&format!("{prefix}.pw_bias"))?,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let spatial = g.depthwise_conv2d(
            x,
            self.dw,
            None,
            ConvParams::same(self.kernel, self.dilation),
        )?;
        g.pointwise_conv2d(spatial, self.pw, Some(self.pw_bias))
    }
}

/// `A = σ(W₁ₓ₁ · GELU(DWConv(X)))`, `X_out = A ⊙ X + X`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub dw: NodeId,
    pub w_1x1: NodeId,
    pub bias: NodeId,
}

impl SpatialAttention {
    pub fn param_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                format!("{prefix}.dw"),
                Shape::new(channels, 1, ATTN_KERNEL, ATTN_KERNEL),
                kaiming(ATTN_KERNEL * ATTN_KERNEL),
            ),
            ParamSpec::new(format!("{prefix}.w1x1"), Shape::new(1, channels, 1, 1), kaiming(channels)),
            ParamSpec::new(format!("{prefix}.bias"), Shape::SCALAR, Init::Zeros),
        ]
    }

    pub fn param_count(channels: usize) -> usize {
        ATTN_KERNEL * ATTN_KERNEL * channels + channels + 1
    }

    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        Ok(SpatialAttention {
            dw: b.id(&format!("{prefix}.dw"))?,
            w_1x1: b.id(&format!("{prefix}.w1x1"))?,
            bias: b.id(&format!("{prefix}.bias"))?,
        })
    }

    /// The N×1×H×W attention map alone.
    pub fn attention_map(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let d = g.depthwise_conv2d(x, self.dw, None, ConvParams::same(ATTN_KERNEL, 1))?;
        let a = g.gelu(d)?;
        let logits = g.pointwise_conv2d(a, self.w_1x1, Some(self.bias))?;
        g.sigmoid(logits)
    }

    /// Returns `(out, attn)`. With `attn_override = Some(v)` the map is the
    /// constant `v` instead of the learned one.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        attn_override: Option<f64>,
    ) -> Result<(NodeId, NodeId)> {
        let s = g.shape(x);
        let attn = match attn_override {
            Some(v) => g.constant(Tensor::full(Shape::new(s.n(), 1, s.h(), s.w()), v))?,
            None => self.attention_map(g, x)?,
        };
        let gated = g.mul(attn, x)?;
        let out = g.add(gated, x)?;
        Ok((out, attn))
    }
}

/// Per-stage tensors of the bridge. The stage's channels are projected to the
/// shared width before the shared layers and back afterwards.
#[derive(Clone, Debug)]
pub struct BridgeStage {
    pub channels: usize,
    pub in_proj: NodeId,
    pub out_proj: NodeId,
    pub out_bias: NodeId,
    pub spatial: SpatialAttention,
}

/// Forces the channel and/or spatial map to a constant.
#[derive(Clone, Copy, Debug, Default)]
pub struct BridgeOverrides {
    pub channel: Option<f64>,
    pub spatial: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BridgeOutput {
    pub out: NodeId,
    /// N×C×1×1
    pub channel_attn: NodeId,
    /// N×1×H×W
    pub spatial_attn: NodeId,
}

/// `T_out = (α·A_c + β·A_s) ⊙ T + T` with the channel path
/// GAP → in-proj → fc1 → GELU → fc2 → out-proj → σ, where fc1/fc2 and α, β are
/// single tensors shared by every decoder stage.
#[derive(Clone, Debug)]
pub struct SharedAttentionBridge {
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
    pub stages: Vec<BridgeStage>,
}

/// Width of the shared fc hidden layer for a given shared width.
pub fn bridge_hidden(shared_width: usize, reduction: usize) -> usize {
    (shared_width / reduction).max(1)
}

impl SharedAttentionBridge {
    pub fn shared_param_specs(prefix: &str, width: usize, hidden: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{prefix}.fc1.w"), Shape::new(hidden, width, 1, 1), kaiming(width)),
            ParamSpec::new(format!("{prefix}.fc1.b"), Shape::new(1, hidden, 1, 1), Init::Zeros),
            ParamSpec::new(format!("{prefix}.fc2.w"), Shape::new(width, hidden, 1, 1), kaiming(hidden)),
            ParamSpec::new(format!("{prefix}.fc2.b"), Shape::new(1, width, 1, 1), Init::Zeros),
            ParamSpec::new(format!("{prefix}.alpha"), Shape::SCALAR, Init::Constant(BRIDGE_MIX_INIT)),
            ParamSpec::new(format!("{prefix}.beta"), Shape::SCALAR, Init::Constant(BRIDGE_MIX_INIT)),
        ]
    }

    pub fn shared_param_count(width: usize, hidden: usize) -> usize {
        2 * width * hidden + hidden + width + 2
    }

    pub fn stage_param_specs(prefix: &str, channels: usize, width: usize) -> Vec<ParamSpec> {
        let mut v = vec![
            ParamSpec::new(format!("{prefix}.in_proj"), Shape::new(width, channels, 1, 1), kaiming(channels)),
            ParamSpec::new(format!("{prefix}.out_proj"), Shape::new(channels, width, 1, 1), kaiming(width)),
            ParamSpec::new(format!("{prefix}.out_bias"), Shape::new(1, channels, 1, 1), Init::Zeros),
        ];
        v.extend(SpatialAttention::param_specs(&format!("{prefix}.sa"), channels));
        v
    }

    pub fn stage_param_count(channels: usize, width: usize) -> usize {
        2 * channels * width + channels + SpatialAttention::param_count(channels)
    }

    /// `stage_prefixes[i]` names the tensors of bridge stage `i`.
    pub fn bind(
        b: &Binding,
        shared_prefix: &str,
        stage_prefixes: &[(String, usize)],
    ) -> Result<Self> {
        let id = |s: &str| b.id(&format!("{shared_prefix}.{s}"));
        let stages = stage_prefixes
            .iter()
            .map(|(p, channels)| {
                Ok(BridgeStage {
                    channels: *channels,
                    in_proj: b.id(&format!("{p}.in_proj"))?,
                    out_proj: b.id(&format!("{p}.out_proj"))?,
                    out_bias: b.id(&format!("{p}.out_bias"))?,
                    spatial: SpatialAttention::bind(b, &format!("{p}.sa"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SharedAttentionBridge {
            fc1_w: id("fc1.w")?,
            fc1_b: id("fc1.b")?,
            fc2_w: id("fc2.w")?,
            fc2_b: id("fc2.b")?,
            alpha: id("alpha")?,
            beta: id("beta")?,
            stages,
        })
    }

    /// N×C×1×1 channel attention for stage `stage`.
    pub fn channel_attention(&self, g: &mut Graph, stage: usize, t: NodeId) -> Result<NodeId> {
        let st = self.stage(stage)?;
        let pooled = g.global_avg_pool(t)?;
        let z = g.fully_connected(pooled, st.in_proj, None)?;
        let h = g.fully_connected(z, self.fc1_w, Some(self.fc1_b))?;
        let h = g.gelu(h)?;
        let z = g.fully_connected(h, self.fc2_w, Some(self.fc2_b))?;
        let logits = g.fully_connected(z, st.out_proj, Some(st.out_bias))?;
        g.sigmoid(logits)
    }

    fn stage(&self, stage: usize) -> Result<&BridgeStage> {
        self.stages.get(stage).ok_or(Error::Index {
            index: stage,
            len: self.stages.len(),
        })
    }

    pub fn forward(&self, g: &mut Graph, stage: usize, t: NodeId) -> Result<BridgeOutput> {
        self.forward_with(g, stage, t, BridgeOverrides::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        stage: usize,
        t: NodeId,
        overrides: BridgeOverrides,
    ) -> Result<BridgeOutput> {
        let st = self.stage(stage)?;
        let s = g.shape(t);
        if s.c() != st.channels {
            return Err(Error::shape(format!(
                "bridge stage {stage} expects {} channels, got {s}",
                st.channels
            )));
        }
        let channel_attn = match overrides.channel {
            Some(v) => g.constant(Tensor::full(Shape::new(s.n(), s.c(), 1, 1), v))?,
            None => self.channel_attention(g, stage, t)?,
        };
        let spatial_attn = match overrides.spatial {
            Some(v) => g.constant(Tensor::full(Shape::new(s.n(), 1, s.h(), s.w()), v))?,
            None => st.spatial.attention_map(g, t)?,
        };
        let ac = g.mul(self.alpha, channel_attn)?;
        let as_ = g.mul(self.beta, spatial_attn)?;
        let gate = g.add(ac, as_)?;
        let gated = g.mul(gate, t)?;
        let out = g.add(gated, t)?;
        Ok(BridgeOutput {
            out,
            channel_attn,
            spatial_attn,
        })
    }
}
