//! Supervised and two-stage distillation training.
//!
//! Stage 1 fits the student to the segmentation target while pulling its
//! encoder taps towards the teacher's and, progressively, its output
//! distribution towards the teacher's. Stage 2 replaces both with a
//! contrastive term on teacher-confident pixels plus weight regularisation and
//! keeps an exponential moving average of the weights, which is returned.

pub mod losses;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid_scalar, Graph, NodeId};
use crate::metrics::{confusion, mean_metrics, metrics, Metrics};
use crate::model::{forward_graph, project_channels, Network, NetworkPlan, NUM_TAPS};
use crate::params::ModelParams;
use crate::data::Sample;
use crate::tensor::Tensor;

use losses::{contrastive_loss_node, mimic_loss_node, preference_partition, reg_loss_node, seg_loss_node};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            eta_min: 0.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.lr) {
            return Err(Error::Config("weight decay and eta_min must be in range".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs as f64;
        self.eta_min + 0.5 * (self.lr - self.eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OmegaSchedule {
    LinearRamp { start: f64, end: f64 },
    Constant { value: f64 },
}

impl OmegaSchedule {
    /// Weight of the KL term at stage-1 epoch `epoch` of `stage1_epochs`.
    pub fn at(&self, epoch: usize, stage1_epochs: usize) -> f64 {
        match *self {
            OmegaSchedule::Constant { value } => value,
            OmegaSchedule::LinearRamp { start, end } => {
                if stage1_epochs <= 1 {
                    start
                } else {
                    let t = (epoch.min(stage1_epochs - 1)) as f64 / (stage1_epochs - 1) as f64;
                    start + (end - start) * t
                }
            }
        }
    }

    pub fn end(&self) -> f64 {
        match *self {
            OmegaSchedule::Constant { value } => value,
            OmegaSchedule::LinearRamp { end, .. } => end,
        }
    }

    fn endpoints(&self) -> [f64; 2] {
        match *self {
            OmegaSchedule::Constant { value } => [value, value],
            OmegaSchedule::LinearRamp { start, end } => [start, end],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Per-tap mimicry weights, shallow to deep.
    pub lambda: Vec<f64>,
    pub omega: OmegaSchedule,
    pub tau_h: f64,
    pub tau_l: f64,
    pub rho: f64,
    pub ema_decay: f64,
    pub temperature: f64,
    /// Share of the epochs spent in stage 1.
    pub stage1_fraction: f64,
    /// Most anchor and negative pixels sampled per step for the contrastive term.
    pub contrast_samples: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: vec![0.2; NUM_TAPS],
            omega: OmegaSchedule::LinearRamp { start: 0.0, end: 1.0 },
            tau_h: 0.8,
            tau_l: 0.2,
            rho: 0.3,
            ema_decay: 0.99,
            temperature: 1.0,
            stage1_fraction: 0.6,
            contrast_samples: 128,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda.len() != NUM_TAPS || self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambda needs {NUM_TAPS} finite non-negative weights"));
        }
        if self.omega.endpoints().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("omega schedule values must lie in [0, 1]".into());
        }
        if !(self.tau_l < self.tau_h && self.tau_l >= 0.0 && self.tau_h <= 1.0) {
            return bad(format!("need 0 <= tau_l < tau_h <= 1, got {} and {}", self.tau_l, self.tau_h));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho {} must be finite and >= 0", self.rho));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0, 1]", self.ema_decay));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return bad(format!("stage-1 fraction {} outside [0, 1]", self.stage1_fraction));
        }
        if self.contrast_samples < 2 {
            return bad("contrast_samples must be >= 2".into());
        }
        Ok(())
    }

    pub fn stage1_epochs(&self, epochs: usize) -> usize {
        ((epochs as f64 * self.stage1_fraction).round() as usize).min(epochs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_mimic: f64,
    pub l_kl: f64,
    pub l_1: f64,
    pub l_cont: f64,
    pub l_reg: f64,
    pub l_2: f64,
}

impl LossReport {
    fn values(&self) -> [f64; 7] {
        [self.l_seg, self.l_mimic, self.l_kl, self.l_1, self.l_cont, self.l_reg, self.l_2]
    }

    fn from_values(v: [f64; 7]) -> Self {
        LossReport {
            l_seg: v[0],
            l_mimic: v[1],
            l_kl: v[2],
            l_1: v[3],
            l_cont: v[4],
            l_reg: v[5],
            l_2: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// One CSV row: epoch means of the step reports plus validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: u8,
    pub omega_kl: f64,
    pub losses: LossReport,
    pub mdice_val: f64,
    pub miou_val: f64,
}

pub const LOG_HEADER: &str =
    "epoch,stage,omega_kl,l_seg,l_mimic,l_kl,l_1,l_cont,l_reg,l_2,mdice_val,miou_val";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let l = &r.losses;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.stage, r.omega_kl, l.l_seg, l.l_mimic, l.l_kl, l.l_1, l.l_cont, l.l_reg, l.l_2, r.mdice_val, r.miou_val
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights: the moving average when stage 2 ran, else the raw weights.
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    /// Steps whose contrastive term was skipped for lack of confident pixels.
    pub degenerate_contrast_steps: usize,
}

/// `θ_ema ← decay·θ_ema + (1 − decay)·θ`, per tensor.
pub fn ema_update(ema: &mut ModelParams, current: &ModelParams, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("ema decay {decay} outside [0, 1]")));
    }
    ema.check_compatible(current)?;
    for (name, e) in ema.iter_mut() {
        let s = current.get(name).expect("checked compatible");
        for (a, &b) in e.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let zeros = |p: &ModelParams| {
            let mut z = ModelParams::new();
            for (n, t) in p.iter() {
                z.insert(n.clone(), Tensor::zeros(t.shape())).expect("unique names");
            }
            z
        };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &std::collections::BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::NameMismatch(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name).expect("same names").data_mut();
            let v = self.v.get_mut(name).expect("same names").data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p -= lr * self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-image metrics of `params` on `samples`, in sample order.
pub fn evaluate(
    plan: &NetworkPlan,
    params: &ModelParams,
    samples: &[Sample],
    threshold: f64,
) -> Result<Vec<(String, Metrics)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let x = Tensor::stack_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let (logits, _) = crate::model::forward(plan, params, &x, false)?;
        for (i, s) in chunk.iter().enumerate() {
            let probs = logits.batch_item(i).map(sigmoid_scalar);
            out.push((s.id.clone(), metrics(&confusion(&probs, &s.mask, threshold)?)));
        }
    }
    Ok(out)
}

/// Mean metrics of `params` on `samples`.
pub fn evaluate_mean(plan: &NetworkPlan, params: &ModelParams, samples: &[Sample], threshold: f64) -> Result<Metrics> {
    let per: Vec<Metrics> = evaluate(plan, params, samples, threshold)?.into_iter().map(|(_, m)| m).collect();
    mean_metrics(&per)
}

/// Frozen teacher outputs for every training sample.
struct TeacherCache {
    logits: Vec<Tensor>,
    taps: Vec<Vec<Tensor>>,
}

impl TeacherCache {
    fn build(teacher: &Network, student: &Network, samples: &[Sample]) -> Result<Self> {
        let widths = student.plan.tap_channels();
        let mut logits = Vec::with_capacity(samples.len());
        let mut taps = Vec::with_capacity(samples.len());
        for s in samples {
            let (l, t) = teacher.forward(&s.image, true)?;
            logits.push(l);
            taps.push(
                t.iter()
                    .zip(&widths)
                    .map(|(t, &w)| project_channels(t, w))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(TeacherCache { logits, taps })
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let logits = Tensor::stack_batch(&idx.iter().map(|&i| &self.logits[i]).collect::<Vec<_>>())?;
        let taps = (0..NUM_TAPS)
            .map(|l| Tensor::stack_batch(&idx.iter().map(|&i| &self.taps[i][l]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, taps))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

struct StepOutput {
    report: LossReport,
    degenerate: bool,
}

fn weighted(g: &mut Graph, acc: NodeId, term: NodeId, w: f64) -> Result<NodeId> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = if w == 1.0 { term } else { g.scale(term, w)? };
    g.add(acc, t)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &Network,
    params: &mut ModelParams,
    opt: &mut AdamW,
    samples: &[Sample],
    idx: &[usize],
    teacher: Option<&TeacherCache>,
    dc: &DistillConfig,
    stage: Stage,
    omega: f64,
    lr: f64,
    contrast_rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let x = Tensor::stack_batch(&idx.iter().map(|&i| &samples[i].image).collect::<Vec<_>>())?;
    let y = Tensor::stack_batch(&idx.iter().map(|&i| &samples[i].mask).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let binding = params.bind(&mut g, true)?;
    let xi = g.constant(x)?;
    let yi = g.constant(y)?;
    let fwd = forward_graph(&mut g, &net.plan, &binding, xi)?;
    let seg = seg_loss_node(&mut g, fwd.logits, yi)?;
    let mut report = LossReport {
        l_seg: g.value(seg).item(),
        ..Default::default()
    };
    let mut degenerate = false;
    let objective = match teacher {
        None => seg,
        Some(cache) => {
            let (t_logits, t_taps) = cache.batch(idx)?;
            let mimic = mimic_loss_node(&mut g, &fwd.taps, &t_taps, &dc.lambda)?;
            let probs = t_logits.map(sigmoid_scalar);
            let tl = g.constant(t_logits)?;
            let kl = g.bernoulli_kl(fwd.logits, tl, dc.temperature)?;
            let pref = preference_partition(&probs, dc.tau_h, dc.tau_l)?;
            let cont = contrastive_loss_node(&mut g, fwd.embedding, &pref, dc.contrast_samples, contrast_rng)?;
            degenerate = cont.is_none();
            let reg = reg_loss_node(&mut g, &binding)?;
            report.l_mimic = g.value(mimic).item();
            report.l_kl = g.value(kl).item();
            report.l_cont = cont.map_or(0.0, |c| g.value(c).item());
            report.l_reg = g.value(reg).item();
            match stage {
                Stage::One => {
                    let o = weighted(&mut g, seg, mimic, 1.0 - omega)?;
                    weighted(&mut g, o, kl, omega)?
                }
                Stage::Two => {
                    let o = match cont {
                        Some(c) => g.add(seg, c)?,
                        None => seg,
                    };
                    weighted(&mut g, o, reg, dc.rho)?
                }
            }
        }
    };
    report.l_1 = losses::stage1_loss(report.l_seg, report.l_mimic, report.l_kl, omega)?;
    report.l_2 = losses::stage2_loss(report.l_seg, report.l_cont, report.l_reg, dc.rho)?;
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss report {report:?}")));
    }
    g.backward(objective)?;
    let grads = binding.grads(&g);
    opt.step(params, &grads, lr)?;
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numeric(format!("parameter `{name}` became non-finite")));
    }
    Ok(StepOutput { report, degenerate })
}

fn run(
    net: &Network,
    teacher: Option<&Network>,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
    dc: &DistillConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    tc.validate()?;
    dc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let cache = teacher
        .map(|t| TeacherCache::build(t, net, train_set))
        .transpose()?;
    let stage1 = if cache.is_some() { dc.stage1_epochs(tc.epochs) } else { tc.epochs };
    let eval_set = if val_set.is_empty() { train_set } else { val_set };

    let mut params = net.params.clone();
    let mut opt = AdamW::new(&params, tc.weight_decay);
    let mut ema: Option<ModelParams> = None;
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut contrast_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    contrast_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut degenerate_steps = 0;

    for epoch in 0..tc.epochs {
        let stage = if epoch < stage1 { Stage::One } else { Stage::Two };
        let omega = match (&cache, stage) {
            (None, _) => 0.0,
            (Some(_), Stage::One) => dc.omega.at(epoch, stage1),
            (Some(_), Stage::Two) => dc.omega.end(),
        };
        if stage == Stage::Two && ema.is_none() {
            ema = Some(params.clone());
        }
        let lr = tc.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 7];
        let mut steps = 0usize;
        for (step, idx) in order.chunks(tc.batch).enumerate() {
            let out = train_step(
                net,
                &mut params,
                &mut opt,
                train_set,
                idx,
                cache.as_ref(),
                dc,
                stage,
                omega,
                lr,
                &mut contrast_rng,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
            if let Some(e) = ema.as_mut() {
                ema_update(e, &params, dc.ema_decay)?;
            }
            degenerate_steps += usize::from(out.degenerate && stage == Stage::Two);
            for (s, v) in sums.iter_mut().zip(out.report.values()) {
                *s += v;
            }
            steps += 1;
        }
        let losses = LossReport::from_values(sums.map(|s| s / steps as f64));
        let current = ema.as_ref().unwrap_or(&params);
        let m = evaluate_mean(&net.plan, current, eval_set, crate::metrics::DEFAULT_THRESHOLD)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, evaluation: {m}")),
                other => other,
            })?;
        let row = LogRow {
            epoch,
            stage: if stage == Stage::One { 1 } else { 2 },
            omega_kl: omega,
            losses,
            mdice_val: m.dice,
            miou_val: m.iou,
        };
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        params: ema.unwrap_or(params),
        log,
        degenerate_contrast_steps: degenerate_steps,
    })
}

/// Plain segmentation training on `L_seg`; validation metrics are computed on
/// `val_set`, or on the training set when it is empty.
pub fn train_supervised(
    net: &Network,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    run(net, None, train_set, val_set, tc, &DistillConfig::default(), on_row)
}

/// Two-stage distillation of `student` from the frozen `teacher`.
pub fn train(
    student: &Network,
    teacher: &Network,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
    dc: &DistillConfig,
    on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if teacher.resolution != student.resolution {
        return Err(Error::Config(format!(
            "teacher resolution {} differs from student {}",
            teacher.resolution, student.resolution
        )));
    }
    let (st, tt) = (student.plan.tap_channels(), teacher.plan.tap_channels());
    if let Some(l) = (0..NUM_TAPS).find(|&l| tt[l] < st[l]) {
        return Err(Error::Config(format!(
            "teacher tap {l} has {} channels, fewer than the student's {}",
            tt[l], st[l]
        )));
    }
    run(student, Some(teacher), train_set, val_set, tc, dc, on_row)
}
