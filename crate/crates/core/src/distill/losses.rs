//! Loss terms of both distillation stages, as graph nodes and as plain values.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::Binding;
use crate::tensor::{Shape, Tensor};

pub const DICE_SMOOTH: f64 = 1.0;
pub const CONTRAST_TEMPERATURE: f64 = 0.1;

/// `0.5·BCE + 0.5·soft Dice` on single-channel logits.
pub fn seg_loss_node(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let bce = g.bce_with_logits(logits, target)?;
    let dice = g.soft_dice(logits, target, DICE_SMOOTH)?;
    let sum = g.add(bce, dice)?;
    g.scale(sum, 0.5)
}

pub fn seg_loss(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone())?;
    let m = g.constant(mask.clone())?;
    let out = seg_loss_node(&mut g, l, m)?;
    Ok(g.value(out).item())
}

/// `Σ_l λ_l · mean((s_l − t_l)²)`. Teacher taps must already be projected to
/// the student widths.
pub fn mimic_loss_node(
    g: &mut Graph,
    student: &[NodeId],
    teacher: &[Tensor],
    weights: &[f64],
) -> Result<NodeId> {
    if student.len() != teacher.len() || student.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} student taps, {} teacher taps, {} weights",
            student.len(),
            teacher.len(),
            weights.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for ((&s, t), &w) in student.iter().zip(teacher).zip(weights) {
        if g.shape(s) != t.shape() {
            return Err(Error::shape(format!(
                "tap shapes differ: student {} vs teacher {}",
                g.shape(s),
                t.shape()
            )));
        }
        let tc = g.constant(t.clone())?;
        let d = g.sub(s, tc)?;
        let sq = g.sum_squares(d)?;
        let term = g.scale(sq, w / t.numel() as f64)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

pub fn mimic_loss(student: &[Tensor], teacher: &[Tensor], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let ids = student
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = mimic_loss_node(&mut g, &ids, teacher, weights)?;
    Ok(g.value(out).item())
}

/// Temperature-scaled Bernoulli KL(teacher ‖ student) averaged over pixels.
pub fn kl_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone())?;
    let t = g.constant(teacher_logits.clone())?;
    let out = g.bernoulli_kl(s, t, temperature)?;
    Ok(g.value(out).item())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
    }
}

/// `l_seg + (1 − ω)·l_mimic + ω·l_kl`.
pub fn stage1_loss(l_seg: f64, l_mimic: f64, l_kl: f64, omega: f64) -> Result<f64> {
    check_unit("omega", omega)?;
    Ok(l_seg + (1.0 - omega) * l_mimic + omega * l_kl)
}

/// `l_seg + l_cont + ρ·l_reg`.
pub fn stage2_loss(l_seg: f64, l_cont: f64, l_reg: f64, rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("rho = {rho} must be >= 0")));
    }
    Ok(l_seg + l_cont + rho * l_reg)
}

/// Pixel masks of confident-foreground, confident-background and the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Preference {
    pub positive: Tensor,
    pub negative: Tensor,
    pub ignored: Tensor,
}

impl Preference {
    pub fn positive_indices(&self) -> Vec<usize> {
        ones(&self.positive)
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        ones(&self.negative)
    }
}

fn ones(mask: &Tensor) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// `p ≥ τ_h` is positive, `p ≤ τ_l` negative, everything else ignored.
pub fn preference_partition(probs: &Tensor, tau_h: f64, tau_l: f64) -> Result<Preference> {
    if !(tau_l < tau_h) {
        return Err(Error::Domain(format!(
            "low threshold {tau_l} must be below high threshold {tau_h}"
        )));
    }
    if let Some(p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let class = |f: &dyn Fn(f64) -> bool| probs.map(|p| if f(p) { 1.0 } else { 0.0 });
    Ok(Preference {
        positive: class(&|p| p >= tau_h),
        negative: class(&|p| p <= tau_l),
        ignored: class(&|p| p > tau_l && p < tau_h),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Set when there were fewer than two positives or no negatives.
    pub degenerate: bool,
}

fn pixel_mask_check(emb: Shape, mask: &Tensor) -> Result<()> {
    let m = mask.shape();
    if m.c() != 1 || m.n() != emb.n() || m.h() != emb.h() || m.w() != emb.w() {
        return Err(Error::shape(format!("mask {m} does not match embeddings {emb}")));
    }
    Ok(())
}

/// InfoNCE over every masked pixel of `emb` (L2-normalised per pixel first).
pub fn contrastive_loss(emb: &Tensor, positive: &Tensor, negative: &Tensor) -> Result<ContrastiveLoss> {
    pixel_mask_check(emb.shape(), positive)?;
    pixel_mask_check(emb.shape(), negative)?;
    let (pos, neg) = (ones(positive), ones(negative));
    if pos.len() < 2 || neg.is_empty() {
        return Ok(ContrastiveLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    let mut g = Graph::new();
    let e = g.constant(emb.clone())?;
    let n = g.l2_normalize_channels(e)?;
    let out = g.info_nce(n, pos, neg, CONTRAST_TEMPERATURE)?;
    Ok(ContrastiveLoss {
        value: g.value(out).item(),
        degenerate: false,
    })
}

/// Up to `cap` indices drawn without replacement, returned sorted.
pub fn subsample<R: Rng + ?Sized>(indices: Vec<usize>, cap: usize, rng: &mut R) -> Vec<usize> {
    if indices.len() <= cap {
        return indices;
    }
    let mut picked: Vec<usize> = sample(rng, indices.len(), cap)
        .into_iter()
        .map(|i| indices[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Graph version used in training: at most `cap` anchors and `cap` negatives
/// are sampled. Returns `None` for a degenerate partition.
pub fn contrastive_loss_node<R: Rng + ?Sized>(
    g: &mut Graph,
    emb: NodeId,
    pref: &Preference,
    cap: usize,
    rng: &mut R,
) -> Result<Option<NodeId>> {
    pixel_mask_check(g.shape(emb), &pref.positive)?;
    let pos = subsample(pref.positive_indices(), cap, rng);
    let neg = subsample(pref.negative_indices(), cap, rng);
    if pos.len() < 2 || neg.is_empty() {
        return Ok(None);
    }
    let n = g.l2_normalize_channels(emb)?;
    g.info_nce(n, pos, neg, CONTRAST_TEMPERATURE).map(Some)
}

/// Mean squared value over every bound parameter.
pub fn reg_loss_node(g: &mut Graph, params: &Binding) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for (_, &id) in params.ids() {
        count += g.value(id).numel();
        let sq = g.sum_squares(id)?;
        total = Some(match total {
            Some(acc) => g.add(acc, sq)?,
            None => sq,
        });
    }
    match total {
        Some(t) => g.scale(t, 1.0 / count as f64),
        None => g.constant(Tensor::scalar(0.0)),
    }
}

pub fn reg_loss(params: &crate::params::ModelParams) -> f64 {
    let count = params.count();
    if count == 0 {
        return 0.0;
    }
    params.iter().map(|(_, t)| t.sum_squares()).sum::<f64>() / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: Shape, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn seg_loss_saturated_and_flat() {
        let mask = t(Shape::new(1, 1, 2, 2), vec![1., 0., 0., 1.]);
        let logits = mask.map(|m| if m == 1.0 { 40.0 } else { -40.0 });
        assert!(seg_loss(&logits, &mask).unwrap() < 1e-6);

        let zero_mask = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let flat = Tensor::zeros(Shape::new(1, 1, 2, 2));
        // Dice with p = 0.5, empty mask: 1 - 1 / (2 + 1).
        let expect = 0.5 * 2f64.ln() + 0.5 * (1.0 - 1.0 / 3.0);
        assert_abs_diff_eq!(seg_loss(&flat, &zero_mask).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn mimic_examples() {
        let s: Vec<Tensor> = (0..5).map(|_| Tensor::zeros(Shape::new(1, 2, 2, 2))).collect();
        let mut tt = s.clone();
        assert_eq!(mimic_loss(&s, &tt, &[0.2; 5]).unwrap(), 0.0);
        tt[0] = Tensor::full(Shape::new(1, 2, 2, 2), 2.0);
        assert_abs_diff_eq!(mimic_loss(&s, &tt, &[1., 0., 0., 0., 0.]).unwrap(), 4.0);
        let a = mimic_loss(&s, &tt, &[0.3; 5]).unwrap();
        let b = mimic_loss(&s, &tt, &[0.6; 5]).unwrap();
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-15);
        tt[1] = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(matches!(mimic_loss(&s, &tt, &[0.2; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_closed_form() {
        let teacher = Tensor::scalar(3f64.ln());
        let student = Tensor::scalar(-(3f64.ln()));
        assert_abs_diff_eq!(kl_loss(&teacher, &student, 1.0).unwrap(), 0.5 * 3f64.ln(), epsilon = 1e-12);
        assert_eq!(kl_loss(&teacher, &teacher, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn stage_compositions() {
        assert_eq!(stage1_loss(1., 2., 4., 0.25).unwrap(), 3.5);
        assert_eq!(stage1_loss(1., 2., 4., 0.0).unwrap(), 3.0);
        assert_eq!(stage1_loss(1., 2., 4., 1.0).unwrap(), 5.0);
        assert!(matches!(stage1_loss(1., 2., 4., 1.5), Err(Error::Domain(_))));
        assert_abs_diff_eq!(stage2_loss(1., 2., 10., 0.3).unwrap(), 6.0, epsilon = 1e-12);
        assert_eq!(stage2_loss(1., 2., 10., 0.0).unwrap(), 3.0);
    }

    #[test]
    fn partition_example() {
        let p = t(Shape::new(1, 1, 1, 3), vec![0.9, 0.5, 0.1]);
        let m = preference_partition(&p, 0.8, 0.2).unwrap();
        assert_eq!(m.positive.data(), &[1., 0., 0.]);
        assert_eq!(m.negative.data(), &[0., 0., 1.]);
        assert_eq!(m.ignored.data(), &[0., 1., 0.]);
        assert!(preference_partition(&p, 0.2, 0.8).is_err());
    }

    #[test]
    fn contrastive_separable_and_degenerate() {
        // Channel 0 on positives, channel 1 on negatives.
        let mut emb = Tensor::zeros(Shape::new(1, 2, 1, 6));
        let mut pos = Tensor::zeros(Shape::new(1, 1, 1, 6));
        let mut neg = Tensor::zeros(Shape::new(1, 1, 1, 6));
        for x in 0..6 {
            if x < 3 {
                emb.set(0, 0, 0, x, 1.0);
                pos.set(0, 0, 0, x, 1.0);
            } else {
                emb.set(0, 1, 0, x, 1.0);
                neg.set(0, 0, 0, x, 1.0);
            }
        }
        let r = contrastive_loss(&emb, &pos, &neg).unwrap();
        assert!(!r.degenerate && r.value < 0.01);
        let none = Tensor::zeros(Shape::new(1, 1, 1, 6));
        let r = contrastive_loss(&emb, &pos, &none).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn subsample_is_sorted_subset() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v: Vec<usize> = (0..100).map(|i| i * 3).collect();
        let s = subsample(v.clone(), 10, &mut rng);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|x| v.contains(x)));
        assert_eq!(subsample(v.clone(), 200, &mut rng), v);
    }
}
