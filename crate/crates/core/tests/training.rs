use microaunet::data::generate_synthetic;
use microaunet::distill::{self, log_csv, DistillConfig, OmegaSchedule, TrainConfig};
use microaunet::model::{build_student, build_teacher, ModelConfig};
use microaunet::{Error, Network};

fn small_pair() -> (Network, Network) {
    let s = build_student(&ModelConfig::student().with_resolution(32)).unwrap();
    let t = build_teacher(&ModelConfig::teacher().with_resolution(32)).unwrap();
    (s, t)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 2,
        ..Default::default()
    }
}

#[test]
fn two_epoch_smoke_run_logs_finite_rows() {
    let (s, t) = small_pair();
    let data = generate_synthetic(4, 32, 3).unwrap();
    let out = distill::train(&s, &t, &data, &[], &cfg(2), &DistillConfig::default(), |_| {}).unwrap();
    assert_eq!(out.log.len(), 2);
    for row in &out.log {
        assert!(row.losses.is_finite());
    }
    assert_eq!(log_csv(&out.log).lines().count(), 3);
}

#[test]
fn omega_logged_at_schedule_endpoints() {
    let (s, t) = small_pair();
    let data = generate_synthetic(2, 32, 3).unwrap();
    let dc = DistillConfig {
        omega: OmegaSchedule::LinearRamp { start: 0.1, end: 0.7 },
        ..Default::default()
    };
    let out = distill::train(&s, &t, &data, &[], &cfg(5), &dc, |_| {}).unwrap();
    let stage1: Vec<_> = out.log.iter().filter(|r| r.stage == 1).collect();
    assert_eq!(stage1.len(), 3);
    assert_eq!(stage1[0].omega_kl, 0.1);
    assert_eq!(stage1[2].omega_kl, 0.7);
    assert!(out.log.iter().skip(3).all(|r| r.stage == 2));
    for r in &out.log {
        let l = &r.losses;
        assert!((l.l_1 - (l.l_seg + (1.0 - r.omega_kl) * l.l_mimic + r.omega_kl * l.l_kl)).abs() < 1e-9);
        assert!((l.l_2 - (l.l_seg + l.l_cont + dc.rho * l.l_reg)).abs() < 1e-9);
    }
}

#[test]
fn zero_weighted_distillation_equals_supervised() {
    let (s, t) = small_pair();
    let data = generate_synthetic(6, 32, 8).unwrap();
    let tc = cfg(3);
    let dc = DistillConfig {
        lambda: vec![0.0; 5],
        omega: OmegaSchedule::Constant { value: 0.0 },
        stage1_fraction: 1.0,
        ..Default::default()
    };
    let a = distill::train(&s, &t, &data, &[], &tc, &dc, |_| {}).unwrap();
    let b = distill::train_supervised(&s, &data, &[], &tc, |_| {}).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.losses.l_seg.to_bits(), y.losses.l_seg.to_bits());
        assert_eq!(x.losses.l_1.to_bits(), y.losses.l_1.to_bits());
        assert_eq!(x.mdice_val.to_bits(), y.mdice_val.to_bits());
    }
}

#[test]
fn runs_are_deterministic() {
    let (s, t) = small_pair();
    let data = generate_synthetic(4, 32, 1).unwrap();
    let run = || distill::train(&s, &t, &data, &[], &cfg(3), &DistillConfig::default(), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.params, b.params);
}

#[test]
fn frozen_average_returns_stage2_entry_weights() {
    let (s, t) = small_pair();
    let data = generate_synthetic(2, 32, 1).unwrap();
    // Decay 1 freezes the average at the weights seen on entering stage 2.
    let dc = DistillConfig {
        ema_decay: 1.0,
        stage1_fraction: 0.5,
        omega: OmegaSchedule::Constant { value: 0.5 },
        ..Default::default()
    };
    let full = distill::train(&s, &t, &data, &[], &cfg(2), &dc, |_| {}).unwrap();
    assert_eq!(full.log[1].stage, 2);
    let stage1 = DistillConfig {
        stage1_fraction: 1.0,
        ..dc.clone()
    };
    let one = distill::train(&s, &t, &data, &[], &cfg(1), &stage1, |_| {}).unwrap();
    assert_eq!(one.params, full.params);
}

#[test]
fn divergence_aborts_with_numeric_error() {
    let (s, _) = small_pair();
    let data = generate_synthetic(2, 32, 1).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch: 2,
        lr: 1e300,
        ..Default::default()
    };
    match distill::train_supervised(&s, &data, &[], &tc, |_| {}) {
        Err(e @ Error::Numeric(_)) => assert!(e.to_string().contains("epoch"), "{e}"),
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_rejected() {
    let (s, t) = small_pair();
    let data = generate_synthetic(2, 32, 1).unwrap();
    let bad = DistillConfig {
        tau_h: 0.1,
        ..Default::default()
    };
    assert!(matches!(
        distill::train(&s, &t, &data, &[], &cfg(1), &bad, |_| {}),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        distill::train_supervised(&s, &[], &[], &cfg(1), |_| {}),
        Err(Error::Empty(_))
    ));
}
