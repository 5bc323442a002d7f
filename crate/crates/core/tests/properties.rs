use microaunet::checkpoint::{decode, encode};
use microaunet::distill::ema_update;
use microaunet::distill::losses::{kl_loss, mimic_loss, preference_partition, stage1_loss, stage2_loss};
use microaunet::graph::Graph;
use microaunet::metrics::{confusion, mean_metrics, metrics, ConfusionCounts, Metrics};
use microaunet::model::project_channels;
use microaunet::nn::{BridgeOverrides, SharedAttentionBridge, SpatialAttention};
use microaunet::params::ModelParams;
use microaunet::{ConvParams, Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn shape_strategy() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn tensor_in(shape: Shape, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(lo..hi, shape.numel()).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

fn tensor_strategy(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    shape_strategy().prop_flat_map(move |s| tensor_in(s, lo, hi))
}

fn mask_for(shape: Shape) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(prop::bool::ANY, shape.numel())
        .prop_map(move |v| Tensor::from_vec(shape, v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_extent_formula(h in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]),
                                  stride in 1usize..3, pad in 0usize..3, dil in 1usize..3) {
        let p = ConvParams::new(stride, pad, dil);
        let span = dil * (k - 1) + 1;
        prop_assume!(h + 2 * pad >= span);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(Shape::new(1, 1, h, h))).unwrap();
        let w = g.constant(Tensor::ones(Shape::new(1, 1, k, k))).unwrap();
        let y = g.conv2d(x, w, None, p).unwrap();
        prop_assert_eq!(g.shape(y).h(), (h + 2 * pad - dil * (k - 1) - 1) / stride + 1);
    }

    #[test]
    fn graph_inputs_precede_nodes(x in tensor_strategy(-2.0, 2.0)) {
        let mut g = Graph::new();
        let a = g.param(x.clone()).unwrap();
        let b = g.gelu(a).unwrap();
        let c = g.mul(a, b).unwrap();
        let d = g.sigmoid(c).unwrap();
        let l = g.mean(d).unwrap();
        for i in [b, c, d, l] {
            prop_assert!(g.inputs(i).iter().all(|p| p.index() < i.index()));
        }
        let before = g.value(d).clone();
        g.backward(l).unwrap();
        prop_assert!(g.value(d).bit_eq(&before));
        prop_assert_eq!(g.grad(a).unwrap().len(), x.numel());
    }

    #[test]
    fn partition_covers_every_pixel(p in tensor_strategy(0.0, 1.0)) {
        let m = preference_partition(&p, 0.8, 0.2).unwrap();
        for i in 0..p.numel() {
            let s = m.positive.data()[i] + m.negative.data()[i] + m.ignored.data()[i];
            prop_assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn dice_dominates_iou(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let m = metrics(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!(m.dice >= m.iou);
        if m.dice == m.iou {
            prop_assert!(m.dice == 0.0 || m.dice == 1.0);
        }
        for v in m.as_array() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn confusion_totals_and_threshold_monotone(
        (pred, mask) in shape_strategy().prop_flat_map(|s| (tensor_in(s, 0.0, 1.0), mask_for(s))),
        t1 in 0.05f64..0.95, dt in 0.0f64..0.5,
    ) {
        let a = confusion(&pred, &mask, t1).unwrap();
        let b = confusion(&pred, &mask, (t1 + dt).min(1.0)).unwrap();
        prop_assert_eq!(a.total() as usize, pred.numel());
        prop_assert!(b.tp <= a.tp);
        if mask.sum() > 0.0 && mask.sum() < mask.numel() as f64 {
            prop_assert_eq!(metrics(&confusion(&mask, &mask, 0.5).unwrap()).as_array(), [1.0; 5]);
        }
    }

    #[test]
    fn mean_metrics_order_invariant(vals in proptest::collection::vec(0.0f64..1.0, 1..12), seed in any::<u64>()) {
        let ms: Vec<Metrics> = vals.iter().map(|&d| Metrics { dice: d, iou: d / 2.0, acc: 1.0 - d, spe: d, sen: d }).collect();
        let mut shuffled = ms.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = mean_metrics(&ms).unwrap();
        let b = mean_metrics(&shuffled).unwrap();
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_and_mimic_nonnegative(
        (s, t) in shape_strategy().prop_flat_map(|sh| (tensor_in(sh, -8.0, 8.0), tensor_in(sh, -8.0, 8.0))),
        temp in 0.5f64..4.0,
    ) {
        let kl = kl_loss(&t, &s, temp).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl_loss(&s, &s, temp).unwrap(), 0.0);
        let taps_s = vec![s.clone(); 5];
        let taps_t = vec![t.clone(); 5];
        let m = mimic_loss(&taps_s, &taps_t, &[0.2; 5]).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(mimic_loss(&taps_s, &taps_s, &[0.2; 5]).unwrap(), 0.0);
        if s.max_abs_diff(&t) > 0.0 {
            prop_assert!(m > 0.0);
        }
    }

    #[test]
    fn composition_identities(seg in 0.0f64..5.0, mim in 0.0f64..5.0, kl in 0.0f64..5.0,
                              omega in 0.0f64..=1.0, cont in 0.0f64..5.0, reg in 0.0f64..5.0, rho in 0.0f64..2.0) {
        let l1 = stage1_loss(seg, mim, kl, omega).unwrap();
        prop_assert!((l1 - (seg + (1.0 - omega) * mim + omega * kl)).abs() < 1e-12);
        let l2 = stage2_loss(seg, cont, reg, rho).unwrap();
        prop_assert!((l2 - (seg + cont + rho * reg)).abs() < 1e-12);
    }

    #[test]
    fn ema_contracts(a in tensor_strategy(-3.0, 3.0), decay in 0.0f64..=1.0, shift in -2.0f64..2.0) {
        let b = a.map(|v| v * 0.5 + shift);
        let mut ema = ModelParams::new();
        ema.insert("w", a.clone()).unwrap();
        let mut cur = ModelParams::new();
        cur.insert("w", b.clone()).unwrap();
        ema_update(&mut ema, &cur, decay).unwrap();
        let dist = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist(ema.get("w").unwrap(), &b) <= decay * dist(&a, &b) + 1e-12);
    }

    #[test]
    fn projection_is_idempotent_on_equal_widths(t in tensor_strategy(-3.0, 3.0)) {
        let c = t.shape().c();
        let p = project_channels(&t, c).unwrap();
        prop_assert!(p.bit_eq(&t));
        let once = project_channels(&t, 1).unwrap();
        prop_assert!(project_channels(&once, 1).unwrap().bit_eq(&once));
    }

    #[test]
    fn checkpoint_round_trip(tensors in proptest::collection::vec(tensor_strategy(-1e6, 1e6), 1..5)) {
        let mut p = ModelParams::new();
        for (i, t) in tensors.into_iter().enumerate() {
            p.insert(format!("layer{i}.w"), t).unwrap();
        }
        let bytes = encode(&p);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn attention_bounded_and_residual_exact(seed in any::<u64>(), c in 1usize..5, hw in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs = SpatialAttention::param_specs("sa", c);
        specs.extend(SharedAttentionBridge::shared_param_specs("br", 4, 2));
        specs.extend(SharedAttentionBridge::stage_param_specs("s0", c, 4));
        let params = ModelParams::from_specs(&specs, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = params.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::randn(Shape::new(2, c, hw, hw), &mut rng)).unwrap();
        let sa = SpatialAttention::bind(&b, "sa").unwrap();
        let (_, attn) = sa.forward(&mut g, x, None).unwrap();
        prop_assert!(g.value(attn).data().iter().all(|&a| a > 0.0 && a < 1.0));
        let (zero, _) = sa.forward(&mut g, x, Some(0.0)).unwrap();
        prop_assert!(g.value(zero).bit_eq(g.value(x)));

        let br = SharedAttentionBridge::bind(&b, "br", &[("s0".to_string(), c)]).unwrap();
        let o = br.forward(&mut g, 0, x).unwrap();
        prop_assert!(g.value(o.channel_attn).data().iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(g.value(o.spatial_attn).data().iter().all(|&a| a > 0.0 && a < 1.0));
        let off = br.forward_with(&mut g, 0, x, BridgeOverrides { channel: Some(0.0), spatial: Some(0.0) }).unwrap();
        prop_assert!(g.value(off.out).bit_eq(g.value(x)));
        // out - t recomputed from the exposed maps and mixing weights.
        let (alpha, beta) = (params.get("br.alpha").unwrap().item(), params.get("br.beta").unwrap().item());
        let xv = g.value(x);
        for n in 0..2 {
            for ch in 0..c {
                for y in 0..hw {
                    for xx in 0..hw {
                        let gate = alpha * g.value(o.channel_attn).at(n, ch, 0, 0) + beta * g.value(o.spatial_attn).at(n, 0, y, xx);
                        let t = xv.at(n, ch, y, xx);
                        let diff = g.value(o.out).at(n, ch, y, xx) - t;
                        prop_assert!((diff - gate * t).abs() <= 1e-12 * (1.0 + t.abs()));
                    }
                }
            }
        }
    }
}
