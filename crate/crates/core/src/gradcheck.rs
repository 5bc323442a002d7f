//! Finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvParams;
use crate::nn::{DsdBlock, SharedAttentionBridge, SpatialAttention};
use crate::params::{Binding, ParamSpec};
use crate::tensor::{Shape, Tensor};

/// Acceptance threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Builds a computation from leaves bound to `inputs` and returns its output.
pub type OpFn<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

/// Reduces a non-scalar output to a scalar through a fixed random projection so
/// every output element contributes a distinct weight.
fn scalarize(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let s = g.shape(out);
    if s.is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ s.numel() as u64);
    let proj = g.constant(Tensor::uniform(s, -1.0, 1.0, &mut rng))?;
    let weighted = g.mul(out, proj)?;
    g.sum(weighted)
}

fn evaluate(op: &OpFn<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut g, &ids)?;
    let loss = scalarize(&mut g, out)?;
    Ok(g.value(loss).item())
}

fn analytic(op: &OpFn<'_>, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut g, &ids)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect())
}

/// Maximum over every input element of
/// `|a - n| / max(|a|, |n|, 1e-8)` where `a` is the analytic gradient and `n`
/// the central difference `(f(x+eps) - f(x-eps)) / (2 eps)`.
pub fn grad_check(op: &OpFn<'_>, inputs: &[Tensor], eps: f64) -> Result<f64> {
    grad_check_inner(op, inputs, eps, 1.0)
}

/// As [`grad_check`], with the analytic gradient multiplied by `corruption`
/// before comparison. Used as a negative control.
pub fn grad_check_inner(op: &OpFn<'_>, inputs: &[Tensor], eps: f64, corruption: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let grads = analytic(op, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in grads.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = evaluate(op, &probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = evaluate(op, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad[i] * corruption;
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!("gradient of input {k} element {i}")));
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    op: Box<OpFn<'static>>,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        op: Box::new(op),
    }
}

/// Parameters listed by `specs`, randomised, then passed as gradcheck inputs in
/// spec order; the closure rebinds them under their names.
fn block_inputs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<String>) {
    specs
        .iter()
        .map(|s| {
            let mut t = Tensor::randn(s.shape, rng);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            (t, s.name.clone())
        })
        .unzip()
}

fn rebind(names: &[String], ids: &[NodeId]) -> Binding {
    Binding::from_pairs(names.iter().cloned().zip(ids.iter().copied()))
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Shape::new(2, 3, 4, 4);
    let mut rand = |s: Shape| Tensor::randn(s, &mut rng);
    let x = rand(base);
    let y = rand(base);
    let w3 = rand(Shape::new(2, 3, 3, 3));
    let b2 = rand(Shape::new(1, 2, 1, 1));
    let wd = rand(Shape::new(3, 1, 3, 3));
    let bd = rand(Shape::new(1, 3, 1, 1));
    let wp = rand(Shape::new(4, 3, 1, 1));
    let bp = rand(Shape::new(1, 4, 1, 1));
    let chan = rand(Shape::new(1, 3, 1, 1));
    let spatial = rand(Shape::new(2, 1, 4, 4));
    let vec_in = rand(Shape::new(2, 3, 1, 1));
    let wfc = rand(Shape::new(5, 3, 1, 1));
    let bfc = rand(Shape::new(1, 5, 1, 1));
    let logits1 = rand(Shape::new(2, 1, 4, 4));
    let teacher1 = rand(Shape::new(2, 1, 4, 4));
    let mut target = Tensor::zeros(Shape::new(2, 1, 4, 4));
    for (i, v) in target.data_mut().iter_mut().enumerate() {
        *v = if (i * 7) % 5 < 2 { 1.0 } else { 0.0 };
    }
    let emb = rand(base);

    let mut out = vec![
        case("conv2d", vec![x.clone(), w3.clone(), b2.clone()], |g, i| {
            g.conv2d(i[0], i[1], Some(i[2]), ConvParams::same(3, 1))
        }),
        case("conv2d_dilated", vec![x.clone(), w3.clone(), b2.clone()], |g, i| {
            g.conv2d(i[0], i[1], Some(i[2]), ConvParams::same(3, 2))
        }),
        case("conv2d_strided", vec![x.clone(), w3.clone(), b2], |g, i| {
            g.conv2d(i[0], i[1], Some(i[2]), ConvParams::new(2, 1, 1))
        }),
        case("depthwise_conv2d", vec![x.clone(), wd.clone(), bd.clone()], |g, i| {
            g.depthwise_conv2d(i[0], i[1], Some(i[2]), ConvParams::same(3, 1))
        }),
        case("depthwise_conv2d_dilated", vec![x.clone(), wd.clone(), bd.clone()], |g, i| {
            g.depthwise_conv2d(i[0], i[1], Some(i[2]), ConvParams::same(3, 2))
        }),
        case("depthwise_conv2d_strided", vec![x.clone(), wd, bd], |g, i| {
            g.depthwise_conv2d(i[0], i[1], Some(i[2]), ConvParams::new(2, 1, 1))
        }),
        case("pointwise_conv2d", vec![x.clone(), wp, bp], |g, i| {
            g.pointwise_conv2d(i[0], i[1], Some(i[2]))
        }),
        case("fully_connected", vec![vec_in, wfc, bfc], |g, i| {
            g.fully_connected(i[0], i[1], Some(i[2]))
        }),
        case("add", vec![x.clone(), y.clone()], |g, i| g.add(i[0], i[1])),
        case("add_broadcast", vec![x.clone(), spatial.clone()], |g, i| g.add(i[0], i[1])),
        case("sub", vec![x.clone(), y.clone()], |g, i| g.sub(i[0], i[1])),
        case("mul", vec![x.clone(), y.clone()], |g, i| g.mul(i[0], i[1])),
        case("mul_broadcast_channel", vec![x.clone(), chan], |g, i| g.mul(i[0], i[1])),
        case("mul_broadcast_spatial", vec![x.clone(), spatial], |g, i| g.mul(i[0], i[1])),
        case("scale", vec![x.clone()], |g, i| g.scale(i[0], -1.7)),
        case("gelu", vec![x.clone()], |g, i| g.gelu(i[0])),
        case("sigmoid", vec![x.clone()], |g, i| g.sigmoid(i[0])),
        case("global_avg_pool", vec![x.clone()], |g, i| g.global_avg_pool(i[0])),
        case("softmax_channels", vec![x.clone()], |g, i| g.softmax_channels(i[0])),
        case("log_softmax_channels", vec![x.clone()], |g, i| g.log_softmax_channels(i[0])),
        case("upsample_nearest2x", vec![x.clone()], |g, i| g.upsample_nearest2x(i[0])),
        case("sum", vec![x.clone()], |g, i| g.sum(i[0])),
        case("mean", vec![x.clone()], |g, i| g.mean(i[0])),
        case("sum_squares", vec![x.clone()], |g, i| g.sum_squares(i[0])),
        case("l2_normalize_channels", vec![x.clone()], |g, i| g.l2_normalize_channels(i[0])),
        case("bce_with_logits", vec![logits1.clone()], {
            let target = target.clone();
            move |g, i| {
                let t = g.constant(target.clone())?;
                g.bce_with_logits(i[0], t)
            }
        }),
        case("soft_dice", vec![logits1.clone()], {
            let target = target.clone();
            move |g, i| {
                let t = g.constant(target.clone())?;
                g.soft_dice(i[0], t, 1.0)
            }
        }),
        case("bernoulli_kl", vec![logits1.clone()], {
            let teacher = teacher1;
            move |g, i| {
                let t = g.constant(teacher.clone())?;
                g.bernoulli_kl(i[0], t, 2.0)
            }
        }),
        case("info_nce", vec![emb.clone()], |g, i| {
            let n = g.l2_normalize_channels(i[0])?;
            g.info_nce(n, vec![0, 3, 5, 17, 20], vec![1, 2, 8, 9, 30, 31], 0.1)
        }),
        case("sum_of_squared_difference", vec![x.clone(), y], |g, i| {
            let d = g.sub(i[0], i[1])?;
            let sq = g.mul(d, d)?;
            g.sum(sq)
        }),
    ];

    let c = base.c();
    let (inputs, names) = block_inputs(&DsdBlock::param_specs("b", 3, c, 4), &mut rng);
    let mut all = vec![x.clone()];
    all.extend(inputs);
    out.push(case("dsd_block", all, move |g, i| {
        let b = rebind(&names, &i[1..]);
        DsdBlock::bind(&b, "b", 3, 2)?.forward(g, i[0])
    }));

    let (inputs, names) = block_inputs(&SpatialAttention::param_specs("sa", c), &mut rng);
    let mut all = vec![x.clone()];
    all.extend(inputs);
    out.push(case("spatial_attention", all, move |g, i| {
        let b = rebind(&names, &i[1..]);
        Ok(SpatialAttention::bind(&b, "sa")?.forward(g, i[0], None)?.0)
    }));

    let (width, hidden) = (4, 2);
    let mut specs = SharedAttentionBridge::shared_param_specs("br", width, hidden);
    specs.extend(SharedAttentionBridge::stage_param_specs("s0", c, width));
    let (inputs, names) = block_inputs(&specs, &mut rng);
    let mut all = vec![x];
    all.extend(inputs);
    out.push(case("attention_bridge", all, move |g, i| {
        let b = rebind(&names, &i[1..]);
        let br = SharedAttentionBridge::bind(&b, "br", &[("s0".to_string(), 3)])?;
        Ok(br.forward(g, 0, i[0])?.out)
    }));

    out.push(case("seg_loss", vec![logits1], move |g, i| {
        let t = g.constant(target.clone())?;
        crate::distill::losses::seg_loss_node(g, i[0], t)
    }));
    out
}

/// Runs every op and block check on seeded inputs. `corrupt` names a case
/// whose analytic gradient is scaled by 1.01 before comparison.
pub fn gradcheck_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCheckRow>> {
    let all = cases(seed);
    if let Some(name) = corrupt {
        if !all.iter().any(|c| c.name == name) {
            return Err(Error::Config(format!("unknown gradcheck case `{name}`")));
        }
    }
    all.into_iter()
        .map(|c| {
            let factor = if corrupt == Some(c.name) { 1.01 } else { 1.0 };
            let err = grad_check_inner(c.op.as_ref(), &c.inputs, GRADCHECK_EPS, factor)?;
            Ok(GradCheckRow {
                name: c.name.to_string(),
                max_rel_error: err,
                elements: c.inputs.iter().map(Tensor::numel).sum(),
            })
        })
        .collect()
}
