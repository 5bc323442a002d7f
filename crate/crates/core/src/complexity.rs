//! Closed-form parameter and operation counts for a [`NetworkPlan`].
//!
//! Counts are derived from layer specs alone; they never touch the builder,
//! so comparing them with a constructed model is a real cross-check.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{LayerKind, LayerSpec, NetworkPlan};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    /// Activations, gating products, residual adds and other one-op-per-value work.
    pub elementwise: u64,
}

impl ComplexityRow {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub plan: String,
    pub resolution: usize,
    pub rows: Vec<ComplexityRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_elementwise: u64,
}

pub const FLOPS_CONVENTION: &str = "FLOPs = 2 x MACs + elementwise ops";

impl ComplexityReport {
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs + self.total_elementwise
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "# {} @ {r}x{r}; {FLOPS_CONVENTION}\n",
            self.plan,
            r = self.resolution
        );
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        writeln!(s, "{:<w$}  {:<6}  {:>10}  {:>14}  {:>12}  {:>14}", "layer", "kind", "params", "macs", "elementwise", "flops").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<w$}  {:<6}  {:>10}  {:>14}  {:>12}  {:>14}",
                r.name,
                r.kind,
                r.params,
                r.macs,
                r.elementwise,
                r.flops()
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:<w$}  {:<6}  {:>10}  {:>14}  {:>12}  {:>14}",
            "total",
            "",
            self.total_params,
            self.total_macs,
            self.total_elementwise,
            self.total_flops()
        )
        .unwrap();
        writeln!(s, "params {:.4} M, FLOPs {:.4} G", self.mparams(), self.gflops()).unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {FLOPS_CONVENTION}\nname,kind,params,macs,elementwise,flops\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{},{}", r.name, r.kind, r.params, r.macs, r.elementwise, r.flops()).unwrap();
        }
        writeln!(
            s,
            "total,,{},{},{},{}",
            self.total_params,
            self.total_macs,
            self.total_elementwise,
            self.total_flops()
        )
        .unwrap();
        s
    }
}

/// Params of a depthwise-separable conv with bias on the pointwise part.
pub fn separable_params(k: usize, c_in: usize, c_out: usize) -> u64 {
    (k * k * c_in + c_in * c_out + c_out) as u64
}

/// Params of a dense conv with bias.
pub fn dense_params(k: usize, c_in: usize, c_out: usize) -> u64 {
    (k * k * c_in * c_out + c_out) as u64
}

fn spatial_attn_counts(c: u64, hw: u64) -> (u64, u64, u64) {
    // depthwise 3x3, GELU, 1x1 to one map with bias, sigmoid, gate and residual
    let params = 9 * c + c + 1;
    let macs = 9 * c * hw + c * hw;
    let elementwise = c * hw + hw + hw + 2 * c * hw;
    (params, macs, elementwise)
}

struct Walker {
    rows: Vec<ComplexityRow>,
}

impl Walker {
    fn push(&mut self, name: String, kind: &str, (params, macs, elementwise): (u64, u64, u64)) {
        self.rows.push(ComplexityRow {
            name,
            kind: kind.to_string(),
            params,
            macs,
            elementwise,
        });
    }
}

fn layer_counts(l: &LayerSpec, hw_out: u64, bridge: Option<(u64, u64)>) -> (u64, u64, u64) {
    let (k2, ci, co) = ((l.k * l.k) as u64, l.c_in as u64, l.c_out as u64);
    match l.kind {
        LayerKind::DsdConv => (
            separable_params(l.k, l.c_in, l.c_out),
            k2 * ci * hw_out + ci * co * hw_out,
            2 * co * hw_out,
        ),
        LayerKind::PlainConv => (dense_params(l.k, l.c_in, l.c_out), k2 * ci * co * hw_out, 2 * co * hw_out),
        LayerKind::SpatialAttn => spatial_attn_counts(ci, hw_out),
        LayerKind::Downsample => (k2 * ci, k2 * ci * hw_out, 0),
        LayerKind::Upsample | LayerKind::OutputHead => (ci * co + co, ci * co * hw_out, co * hw_out),
        LayerKind::BridgeStage => {
            let (w, _) = bridge.unwrap_or((ci, 1));
            let (sa_p, sa_m, _) = spatial_attn_counts(ci, hw_out);
            let params = 2 * ci * w + ci + sa_p;
            let macs = 2 * ci * w + sa_m;
            // spatial map: GELU, bias, sigmoid
            let map = ci * hw_out + 2 * hw_out;
            // pooling, channel sigmoid, the two mixing products, gate add,
            // gating product and residual
            let elementwise = map + ci * hw_out + 2 * ci + hw_out + 3 * ci * hw_out;
            (params, macs, elementwise)
        }
    }
}

/// Per-layer and total counts for `plan` at `resolution`×`resolution`.
pub fn analyze(plan: &NetworkPlan, resolution: usize) -> Result<ComplexityReport> {
    plan.validate(resolution)?;
    let mut walk = Walker { rows: Vec::new() };
    let bridge = plan.bridge.map(|b| (b.shared_width as u64, b.hidden as u64));
    let bridged = plan
        .decoder
        .iter()
        .filter(|s| s.iter().any(|l| l.kind == LayerKind::BridgeStage))
        .count() as u64;
    if let (Some((w, h)), true) = (bridge, bridged > 0) {
        // The shared layers run once per bridged stage.
        let params = 2 * w * h + h + w + 2;
        walk.push("bridge.shared".into(), "fc", (params, bridged * 2 * w * h, bridged * h));
    }
    let mut side = resolution;
    let mut stage_side = Vec::with_capacity(plan.depth());
    for (i, stage) in plan.encoder.iter().enumerate() {
        for (j, l) in stage.iter().enumerate() {
            if l.kind == LayerKind::Downsample {
                side /= 2;
            }
            let hw = (side * side) as u64;
            walk.push(format!("enc{i}.{j}.{}", l.kind.short()), l.kind.short(), layer_counts(l, hw, bridge));
        }
        stage_side.push(side);
    }
    for i in (0..plan.decoder.len()).rev() {
        let hw = (stage_side[i] * stage_side[i]) as u64;
        let c = plan.stage_channels(i) as u64;
        for (j, l) in plan.decoder[i].iter().enumerate() {
            walk.push(format!("dec{i}.{j}.{}", l.kind.short()), l.kind.short(), layer_counts(l, hw, bridge));
        }
        walk.push(format!("dec{i}.skip_add"), "add", (0, 0, c * hw));
    }
    let hw = (stage_side[0] * stage_side[0]) as u64;
    walk.push("head".into(), plan.head.kind.short(), layer_counts(&plan.head, hw, bridge));
    let rows = walk.rows;
    Ok(ComplexityReport {
        plan: plan.name.clone(),
        resolution,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_elementwise: rows.iter().map(|r| r.elementwise).sum(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_student, build_teacher, ModelConfig};

    #[test]
    fn single_conv_hand_count() {
        let l = LayerSpec::plain(1, 1);
        let (p, m, _) = layer_counts(&l, 16, None);
        assert_eq!((p, m), (10, 144));
    }

    #[test]
    fn separable_vs_dense() {
        assert_eq!(separable_params(3, 16, 16), 416);
        assert_eq!(dense_params(3, 16, 16), 2320);
    }

    #[test]
    fn analyzer_matches_builder() {
        for net in [
            build_student(&ModelConfig::student()).unwrap(),
            build_teacher(&ModelConfig::teacher()).unwrap(),
        ] {
            let r = analyze(&net.plan, 64).unwrap();
            assert_eq!(r.total_params, net.param_count() as u64);
            assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        }
    }

    #[test]
    fn params_resolution_free_macs_scale() {
        let plan = build_student(&ModelConfig::student()).unwrap().plan;
        let a = analyze(&plan, 64).unwrap();
        let b = analyze(&plan, 128).unwrap();
        assert_eq!(a.total_params, b.total_params);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            if ra.kind == "dsd" || ra.kind == "conv" || ra.kind == "down" || ra.kind == "up" {
                assert_eq!(rb.macs, 4 * ra.macs, "{}", ra.name);
            }
        }
    }
}
