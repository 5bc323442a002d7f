//! Pixel confusion counts and the five segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// A pixel is predicted foreground when its probability is `>= threshold`.
pub fn confusion(probs: &Tensor, mask: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if probs.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "prediction {} vs mask {}",
            probs.shape(),
            mask.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &m) in probs.data().iter().zip(mask.data()) {
        match (p >= threshold, m >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub spe: f64,
    pub sen: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 5] {
        [self.dice, self.iou, self.acc, self.spe, self.sen]
    }
}

/// `num / den`, or 1.0 when both are zero (nothing to find, nothing found).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        spe: ratio(c.tn, c.tn + c.fp),
        sen: ratio(c.tp, c.tp + c.fn_),
    }
}

pub fn mean_metrics(per_image: &[Metrics]) -> Result<Metrics> {
    if per_image.is_empty() {
        return Err(Error::Empty("no per-image metrics to average".into()));
    }
    let n = per_image.len() as f64;
    let mut sum = [0.0; 5];
    for m in per_image {
        for (s, v) in sum.iter_mut().zip(m.as_array()) {
            *s += v;
        }
    }
    Ok(Metrics {
        dice: sum[0] / n,
        iou: sum[1] / n,
        acc: sum[2] / n,
        spe: sum[3] / n,
        sen: sum[4] / n,
    })
}

/// Per-image rows plus a trailing `mean` row.
pub fn metrics_csv(rows: &[(String, Metrics)], threshold: f64) -> Result<String> {
    let per: Vec<Metrics> = rows.iter().map(|(_, m)| *m).collect();
    let mean = mean_metrics(&per)?;
    let mut out = format!("# threshold={threshold}\nimage_id,dice,iou,acc,spe,sen\n");
    for (id, m) in rows.iter().map(|(i, m)| (i.as_str(), m)).chain([("mean", &mean)]) {
        writeln!(out, "{id},{},{},{},{},{}", m.dice, m.iou, m.acc, m.spe, m.sen).expect("string write");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn counts_example() {
        let mut mask = Tensor::zeros(Shape::new(1, 1, 4, 4));
        for i in 0..3 {
            mask.data_mut()[i * 5] = 1.0;
        }
        let c = confusion(&Tensor::ones(mask.shape()), &mask, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 13, fn_: 0, tn: 0 });
        let exact = confusion(&mask, &mask, 0.5).unwrap();
        assert_eq!((exact.fp, exact.fn_), (0, 0));
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 12 });
        assert!((m.dice - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
        assert_eq!(m.acc, 0.875);
        assert!((m.spe - 12.0 / 13.0).abs() < 1e-15);
        assert!((m.sen - 2.0 / 3.0).abs() < 1e-15);
        let empty = metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!(empty.as_array(), [1.0; 5]);
    }

    #[test]
    fn mean_rules() {
        let a = Metrics { dice: 0.8, ..Default::default() };
        let b = Metrics { dice: 0.6, ..Default::default() };
        assert!((mean_metrics(&[a, b]).unwrap().dice - 0.7).abs() < 1e-15);
        assert_eq!(mean_metrics(&[a]).unwrap(), a);
        assert!(matches!(mean_metrics(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn csv_has_threshold_header() {
        let csv = metrics_csv(&[("a".into(), Metrics::default())], 0.5).unwrap();
        assert!(csv.starts_with("# threshold=0.5\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
