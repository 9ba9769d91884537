//! Segmentation metrics: per-class IoU pooled over episodes, mIoU over the
//! novel classes, and foreground-background IoU.

use alloc::collections::BTreeMap;

use crate::error::{bail, Error, Result};
use crate::tensor::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: u64,
}

impl Counts {
    /// Counts for a single prediction / ground-truth pair.
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            bail!(Contract, "prediction {:?} and ground truth {:?} differ in shape", pred.dims(), gt.dims());
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    /// `TP / (TP + FP + FN)`; `None` when nothing was predicted or present.
    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.tp as f64 / u as f64)
    }
}

/// Per-class confusion counts accumulated over query images. Merging is
/// associative and commutative.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionCounts {
    pub per_class: BTreeMap<usize, Counts>,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, class_id: usize) -> Result<()> {
        let c = Counts::of(pred, gt)?;
        self.per_class.entry(class_id).or_default().merge(c);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (&k, &c) in &other.per_class {
            self.per_class.entry(k).or_default().merge(c);
        }
    }

    pub fn iou(&self, class_id: usize) -> Option<f64> {
        self.per_class.get(&class_id).and_then(Counts::iou)
    }

    /// Unweighted mean IoU over `classes`; every class must have been evaluated.
    pub fn miou(&self, classes: &[usize]) -> Result<f64> {
        if classes.is_empty() {
            bail!(Contract, "mIoU over an empty class list");
        }
        let mut sum = 0.0;
        for &c in classes {
            sum += self.iou(c).ok_or(Error::Unevaluated(c))?;
        }
        Ok(sum / classes.len() as f64)
    }
}

/// Foreground/background pooled counts: every class is one foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FbCounts {
    pub foreground: Counts,
    pub background: Counts,
}

impl FbCounts {
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        self.foreground.merge(Counts::of(pred, gt)?);
        self.background.merge(Counts::of(&pred.not(), &gt.not())?);
        Ok(())
    }

    pub fn merge(&mut self, other: FbCounts) {
        self.foreground.merge(other.foreground);
        self.background.merge(other.background);
    }

    /// Mean of foreground and background IoU. A side with an empty union
    /// counts as perfectly matched.
    pub fn fbiou(&self) -> f64 {
        (self.foreground.iou().unwrap_or(1.0) + self.background.iou().unwrap_or(1.0)) / 2.0
    }
}

pub fn fbiou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        bail!(Contract, "need matching, non-empty prediction and ground-truth lists");
    }
    let mut fb = FbCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        fb.accumulate(p, g)?;
    }
    Ok(fb.fbiou())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_examples() {
        let gt = Mask::from_fn(4, 4, |i, j| i * 4 + j < 10);
        let mut cc = ConfusionCounts::new();
        cc.accumulate(&gt, &gt, 1).unwrap();
        assert_eq!(cc.per_class[&1], Counts { tp: 10, fp: 0, fn_: 0 });

        let pred = Mask::from_fn(3, 3, |i, _| i == 0);
        let gt = Mask::from_fn(3, 3, |i, j| i == 2 || (i == 1 && j == 0));
        assert_eq!(Counts::of(&pred, &gt).unwrap(), Counts { tp: 0, fp: 3, fn_: 4 });

        let gt = Mask::from_rows(&[[1, 1, 1, 1], [0, 0, 0, 0]]).unwrap();
        let pred = Mask::from_rows(&[[1, 1, 0, 0], [1, 0, 0, 0]]).unwrap();
        let c = Counts::of(&pred, &gt).unwrap();
        assert_eq!(c, Counts { tp: 2, fp: 1, fn_: 2 });
        assert_eq!(c.iou(), Some(0.4));

        assert!(matches!(Counts::of(&Mask::zeros(2, 2), &Mask::zeros(2, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn miou_examples() {
        let mut cc = ConfusionCounts::new();
        cc.per_class.insert(0, Counts { tp: 2, fp: 1, fn_: 2 });
        cc.per_class.insert(1, Counts { tp: 3, fp: 1, fn_: 1 });
        assert!((cc.miou(&[0, 1]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cc.miou(&[0, 7]), Err(Error::Unevaluated(7)));
        let mut perfect = ConfusionCounts::new();
        perfect.per_class.insert(3, Counts { tp: 5, fp: 0, fn_: 0 });
        assert_eq!(perfect.miou(&[3]).unwrap(), 1.0);
    }

    #[test]
    fn fbiou_examples() {
        let gt = Mask::from_fn(4, 4, |_, j| j < 2);
        assert_eq!(fbiou(&[gt.clone()], &[gt.clone()]).unwrap(), 1.0);
        assert_eq!(fbiou(&[gt.not()], &[gt]).unwrap(), 0.0);
        assert!(fbiou(&[], &[]).is_err());
    }
}
