//! Library results checked against independent brute-force references.

use microaunet::complexity::{analyze, dense_params, separable_params};
use microaunet::data::generate_synthetic;
use microaunet::distill::losses::contrastive_loss;
use microaunet::graph::Graph;
use microaunet::metrics::{confusion, metrics, ConfusionCounts};
use microaunet::model::{build_student, build_teacher, ModelConfig, NUM_TAPS};
use microaunet::nn::DsdBlock;
use microaunet::{ConvParams, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution with explicit zero padding.
fn conv_reference(x: &Tensor, w: &Tensor, b: Option<&[f64]>, p: ConvParams, groups_eq_channels: bool) -> Tensor {
    let [n, c, h, wd] = x.shape().0;
    let [co, ci_w, k, _] = w.shape().0;
    let span = p.dilation * (k - 1) + 1;
    let ho = (h + 2 * p.pad - span) / p.stride + 1;
    let wo = (wd + 2 * p.pad - span) / p.stride + 1;
    let mut out = Tensor::zeros(Shape::new(n, co, ho, wo));
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    let chans: Vec<usize> = if groups_eq_channels { vec![o] } else { (0..c).collect() };
                    for (wi, &ch) in chans.iter().enumerate() {
                        let wc = if groups_eq_channels { 0 } else { wi };
                        assert!(wc < ci_w);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * p.stride + ky * p.dilation) as isize - p.pad as isize;
                                let ix = (xx * p.stride + kx * p.dilation) as isize - p.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(b_, ch, iy as usize, ix as usize) * w.at(o, wc, ky, kx);
                            }
                        }
                    }
                    out.set(b_, o, y, xx, acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_reference_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let (n, c, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let dil = rng.gen_range(1..3);
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..3);
        let p = ConvParams::new(stride, pad, dil);
        if p.out_extent(h, k).is_none() || p.out_extent(w, k).is_none() {
            continue;
        }
        let x = Tensor::randn(Shape::new(n, c, h, w), &mut rng);
        let wt = Tensor::randn(Shape::new(co, c, k, k), &mut rng);
        let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xi = g.constant(x.clone()).unwrap();
        let wi = g.constant(wt.clone()).unwrap();
        let bi = g.constant(Tensor::channel_vector(&bias)).unwrap();
        let y = g.conv2d(xi, wi, Some(bi), p).unwrap();
        let expect = conv_reference(&x, &wt, Some(&bias), p, false);
        assert_eq!(g.shape(y), expect.shape());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);

        let wd = Tensor::randn(Shape::new(c, 1, k, k), &mut rng);
        let wdi = g.constant(wd.clone()).unwrap();
        let yd = g.depthwise_conv2d(xi, wdi, None, p).unwrap();
        let expect = conv_reference(&x, &wd, None, p, true);
        assert!(g.value(yd).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv_spec_examples() {
    let ones = |s| Tensor::ones(s);
    let mut g = Graph::new();
    let x = g.constant(ones(Shape::new(1, 1, 3, 3))).unwrap();
    let w = g.constant(ones(Shape::new(1, 1, 3, 3))).unwrap();
    let y = g.conv2d(x, w, None, ConvParams::new(1, 1, 1)).unwrap();
    assert_eq!(g.value(y).at(0, 0, 1, 1), 9.0);
    assert_eq!(g.value(y).at(0, 0, 0, 0), 4.0);
    let x5 = g.constant(ones(Shape::new(1, 1, 5, 5))).unwrap();
    let y = g.conv2d(x5, w, None, ConvParams::new(1, 2, 2)).unwrap();
    assert_eq!(g.value(y).at(0, 0, 2, 2), 9.0);
}

/// Pixel counting written independently of `confusion`.
fn metric_reference(pred: &[f64], mask: &[f64]) -> [f64; 5] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        let p = pred[i] >= 0.5;
        let m = mask[i] == 1.0;
        if p && m {
            tp += 1.0;
        } else if p {
            fp += 1.0;
        } else if m {
            fn_ += 1.0;
        } else {
            tn += 1.0;
        }
    }
    let safe = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
    [
        safe(2.0 * tp, 2.0 * tp + fp + fn_),
        safe(tp, tp + fp + fn_),
        safe(tp + tn, tp + fp + fn_ + tn),
        safe(tn, tn + fp),
        safe(tp, tp + fn_),
    ]
}

#[test]
fn metrics_agree_with_pixel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let s = Shape::new(1, 1, rng.gen_range(1..12), rng.gen_range(1..12));
        let fg: f64 = rng.gen();
        let pred = Tensor::uniform(s, 0.0, 1.0, &mut rng);
        let mask = Tensor::uniform(s, 0.0, 1.0, &mut rng).map(|v| if v < fg { 1.0 } else { 0.0 });
        let got = metrics(&confusion(&pred, &mask, 0.5).unwrap()).as_array();
        let want = metric_reference(pred.data(), mask.data());
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn confusion_counts_example() {
    let mut mask = Tensor::zeros(Shape::new(1, 1, 4, 4));
    for i in [1, 6, 11] {
        mask.data_mut()[i] = 1.0;
    }
    let c = confusion(&Tensor::ones(mask.shape()), &mask, 0.5).unwrap();
    assert_eq!(c, ConfusionCounts { tp: 3, fp: 13, fn_: 0, tn: 0 });
}

/// InfoNCE straight from its definition, on already-normalised vectors.
fn info_nce_reference(pos: &[Vec<f64>], neg: &[Vec<f64>], t: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / t;
    let mut total = 0.0;
    for (i, a) in pos.iter().enumerate() {
        let num: f64 = pos.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| dot(a, p).exp()).sum();
        let den: f64 = num + neg.iter().map(|n| dot(a, n).exp()).sum::<f64>();
        total += -(num / den).ln();
    }
    total / pos.len() as f64
}

#[test]
fn contrastive_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Shape::new(2, 3, 3, 3);
    let emb = Tensor::randn(s, &mut rng);
    let mut pos = Tensor::zeros(Shape::new(2, 1, 3, 3));
    let mut neg = Tensor::zeros(Shape::new(2, 1, 3, 3));
    for i in 0..18 {
        match i % 3 {
            0 => pos.data_mut()[i] = 1.0,
            1 => neg.data_mut()[i] = 1.0,
            _ => {}
        }
    }
    let vec_at = |i: usize| {
        let (n, r) = (i / 9, i % 9);
        let v: Vec<f64> = (0..3).map(|c| emb.at(n, c, r / 3, r % 3)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let p: Vec<_> = (0..18).filter(|i| i % 3 == 0).map(vec_at).collect();
    let q: Vec<_> = (0..18).filter(|i| i % 3 == 1).map(vec_at).collect();
    let got = contrastive_loss(&emb, &pos, &neg).unwrap();
    assert!(!got.degenerate);
    assert!((got.value - info_nce_reference(&p, &q, 0.1)).abs() < 1e-9);

    // Identical vectors everywhere: ln(N + P - 1) - ln(P - 1).
    let same = Tensor::ones(s);
    let got = contrastive_loss(&same, &pos, &neg).unwrap().value;
    let (np, nn) = (6.0, 6.0);
    assert!((got - ((nn + np - 1.0f64).ln() - (np - 1.0f64).ln())).abs() < 1e-9);
}

#[test]
fn separable_counts_match_constructed_blocks() {
    let count = |specs: Vec<microaunet::params::ParamSpec>| specs.iter().map(|s| s.shape.numel()).sum::<usize>();
    assert_eq!(count(DsdBlock::param_specs("b", 3, 16, 16)), 416);
    assert_eq!(DsdBlock::param_count(3, 16, 16), 416);
    assert_eq!(separable_params(3, 16, 16), 416);
    assert_eq!(dense_params(3, 16, 16), 2320);
    // Ratio ignoring bias: 1/C_out + 1/K².
    let ratio: f64 = (9.0 * 16.0 + 256.0) / (9.0 * 256.0);
    assert!((ratio - (1.0 / 16.0 + 1.0 / 9.0)).abs() < 1e-15);
}

#[test]
fn depth_one_plan_hand_count() {
    let cfg = ModelConfig {
        widths: vec![6],
        dilations: vec![1],
        ..ModelConfig::student()
    };
    let net = build_student(&cfg).unwrap();
    // dsd 3->6, spatial attention on 6 channels, then the 6->1 head.
    let dsd = 9 * 3 + 3 * 6 + 6;
    let attn = 9 * 6 + 6 + 1;
    let head = 6 + 1;
    assert_eq!(net.param_count(), dsd + attn + head);
    assert_eq!(analyze(&net.plan, 64).unwrap().total_params as usize, net.param_count());
    assert_eq!(net.plan.taps, vec![0; NUM_TAPS]);
}

#[test]
fn student_and_teacher_contracts() {
    let s = build_student(&ModelConfig::student()).unwrap();
    let t = build_teacher(&ModelConfig::teacher()).unwrap();
    assert!(s.param_count() < 50_000);
    assert!(t.param_count() >= 4 * s.param_count());
    for (a, b) in s.plan.tap_channels().iter().zip(t.plan.tap_channels()) {
        assert!(b >= *a);
    }
    assert_eq!(s.plan.tap_resolutions(64), t.plan.tap_resolutions(64));
    let x = generate_synthetic(1, 64, 0).unwrap().remove(0).image;
    for net in [&s, &t] {
        let (logits, taps) = net.forward(&x, true).unwrap();
        assert_eq!(logits.shape(), Shape::new(1, 1, 64, 64));
        assert_eq!(taps.len(), NUM_TAPS);
        let (again, _) = net.forward(&x, true).unwrap();
        assert!(again.bit_eq(&logits));
    }
    let wrong = Tensor::zeros(Shape::new(1, 3, 32, 32));
    assert!(s.forward(&wrong, false).is_err());
}
