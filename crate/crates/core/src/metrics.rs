//! Confusion counting and the precision / recall / F1 / OA / IoU suite.

use std::fmt::Write as _;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use ndarray::{ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel tallies with "change" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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

    /// Exchange the roles of prediction and ground truth.
    pub fn transposed(&self) -> Self {
        Self {
            fp: self.fn_,
            fn_: self.fp,
            ..*self
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Count a binary prediction against a binary ground truth.
pub fn confusion<D: Dimension>(
    pred: ArrayView<u8, D>,
    gt: ArrayView<u8, D>,
) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &y| match (p != 0, y != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub iou: f64,
    pub f1_bg: f64,
    pub iou_bg: f64,
    pub mf1: f64,
    pub miou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Derive every metric from pooled counts. Zero denominators yield 0.
pub fn report(c: &ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = f1_of(precision, recall);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    // Background as the positive class: TN plays TP, FN plays FP.
    let p_bg = ratio(c.tn, c.tn + c.fn_);
    let r_bg = ratio(c.tn, c.tn + c.fp);
    let f1_bg = f1_of(p_bg, r_bg);
    let iou_bg = ratio(c.tn, c.tn + c.fn_ + c.fp);
    Ok(MetricReport {
        precision,
        recall,
        f1,
        oa: ratio(c.tp + c.tn, total),
        iou,
        f1_bg,
        iou_bg,
        mf1: (f1 + f1_bg) / 2.0,
        miou: (iou + iou_bg) / 2.0,
    })
}

impl MetricReport {
    pub const KEYS: [&'static str; 9] = [
        "precision", "recall", "f1", "oa", "iou", "f1_bg", "iou_bg", "mf1", "miou",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.precision,
            self.recall,
            self.f1,
            self.oa,
            self.iou,
            self.f1_bg,
            self.iou_bg,
            self.mf1,
            self.miou,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            precision: v[0],
            recall: v[1],
            f1: v[2],
            oa: v[3],
            iou: v[4],
            f1_bg: v[5],
            iou_bg: v[6],
            mf1: v[7],
            miou: v[8],
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        Self::KEYS
            .iter()
            .position(|k| *k == key)
            .map(|i| self.values()[i])
    }

    /// One `key=value` line per metric, as percentages with two decimals.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k}={:.2}", 100.0 * v);
        }
        s
    }

    pub fn write_files(&self, counts: &ConfusionCounts, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = self.to_key_values();
        let _ = writeln!(
            text,
            "tp={}\nfp={}\nfn={}\ntn={}",
            counts.tp, counts.fp, counts.fn_, counts.tn
        );
        std::fs::write(dir.join(format!("{stem}.txt")), text)?;
        let json = serde_json::json!({ "metrics": self, "counts": counts });
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&json)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn identical_masks() {
        let gt = Array2::from_shape_fn((4, 4), |(r, c)| u8::from(r == c));
        let c = confusion(gt.view(), gt.view()).unwrap();
        assert_eq!(c, counts(4, 0, 0, 12));
        let r = report(&c).unwrap();
        assert!(r.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_false_positives() {
        let pred = Array2::<u8>::ones((3, 5));
        let gt = Array2::<u8>::zeros((3, 5));
        assert_eq!(confusion(pred.view(), gt.view()).unwrap(), counts(0, 15, 0, 0));
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(matches!(confusion(a.view(), b.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn worked_examples() {
        let r = report(&counts(50, 50, 0, 0)).unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.oa, 0.5);
        assert_eq!(r.iou, 0.5);

        let r = report(&counts(2, 1, 1, 6)).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.oa - 0.8).abs() < 1e-15);
        assert_eq!(r.iou, 0.5);
        assert_eq!(r.iou_bg, 0.75);
        assert_eq!(r.miou, 0.625);
    }

    #[test]
    fn zero_denominators() {
        let r = report(&counts(0, 0, 0, 10)).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.f1_bg, 1.0);
        assert!(matches!(report(&ConfusionCounts::default()), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn key_value_block_uses_two_decimals() {
        let text = report(&counts(2, 1, 1, 6)).unwrap().to_key_values();
        assert!(text.contains("precision=66.67\n"));
        assert!(text.contains("miou=62.50\n"));
    }

    proptest! {
        #[test]
        fn swapping_pred_and_gt(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 1u64..50) {
            let c = counts(tp, fp, fn_, tn);
            let a = report(&c).unwrap();
            let b = report(&c.transposed()).unwrap();
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert_eq!(a.iou, b.iou);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }

        #[test]
        fn counts_are_additive(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = || Array2::from_shape_fn((5, 6), |_| u8::from(rng.gen_bool(0.3)));
            let (pa, ga, pb, gb) = (gen(), gen(), gen(), gen());
            let split = confusion(pa.view(), ga.view()).unwrap() + confusion(pb.view(), gb.view()).unwrap();
            let joined_p = ndarray::concatenate![ndarray::Axis(0), pa, pb];
            let joined_g = ndarray::concatenate![ndarray::Axis(0), ga, gb];
            prop_assert_eq!(split, confusion(joined_p.view(), joined_g.view()).unwrap());
        }

        #[test]
        fn report_fields_bounded(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, tn in 0u64..100) {
            let c = counts(tp, fp, fn_, tn);
            prop_assume!(c.total() > 0);
            let r = report(&c).unwrap();
            for v in r.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((r.mf1 - (r.f1 + r.f1_bg) / 2.0).abs() < 1e-15);
            prop_assert!((r.miou - (r.iou + r.iou_bg) / 2.0).abs() < 1e-15);
        }
    }
}
