//! One-vs-rest confusion counts and the derived segmentation scores.

use std::ops::AddAssign;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Per-class counts of true/false positives and negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub dsc: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn from_labels(pred: &[usize], target: &[usize], classes: usize) -> Result<Self, TensorError> {
        let mut c = Confusion::new(classes);
        c.record(pred, target)?;
        Ok(c)
    }

    pub fn record(&mut self, pred: &[usize], target: &[usize]) -> Result<(), TensorError> {
        let z = self.classes();
        if pred.len() != target.len() {
            return Err(TensorError::shape("confusion", format!("{} predictions, {} labels", pred.len(), target.len())));
        }
        if let Some(bad) = pred.iter().chain(target).find(|&&v| v >= z) {
            return Err(TensorError::shape("confusion", format!("class {bad} outside {z}")));
        }
        for (&p, &y) in pred.iter().zip(target) {
            for c in 0..z {
                match (p == c, y == c) {
                    (true, true) => self.tp[c] += 1,
                    (true, false) => self.fp[c] += 1,
                    (false, true) => self.fn_[c] += 1,
                    (false, false) => self.tn[c] += 1,
                }
            }
        }
        Ok(())
    }

    /// Scores of one class. A class absent from both prediction and target has DSC 1.
    pub fn class_scores(&self, c: usize) -> Scores {
        let (tp, fp, fn_, tn) = (self.tp[c], self.fp[c], self.fn_[c], self.tn[c]);
        Scores {
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            acc: ratio(tp + tn, tp + tn + fp + fn_),
        }
    }

    /// Unweighted mean over all classes, background included.
    pub fn mean_scores(&self) -> Scores {
        let z = self.classes() as f64;
        let mut m = Scores::default();
        for c in 0..self.classes() {
            let s = self.class_scores(c);
            m.dsc += s.dsc / z;
            m.se += s.se / z;
            m.sp += s.sp / z;
            m.acc += s.acc / z;
        }
        m
    }
}

impl AddAssign<&Confusion> for Confusion {
    fn add_assign(&mut self, other: &Confusion) {
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
            (&mut self.tn, &other.tn),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Per-pixel argmax over the class axis of `[Z×H×W]` logits; ties go to the lowest class.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    let (z, n) = (shape[0], shape[1..].iter().product::<usize>());
    let d = logits.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..z {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean scores of a single prediction.
pub fn metrics(pred: &[usize], target: &[usize], classes: usize) -> Result<Scores, TensorError> {
    Ok(Confusion::from_labels(pred, target, classes)?.mean_scores())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 1, 0, 2];
        let s = metrics(&y, &y, 3).unwrap();
        assert_eq!(s, Scores { dsc: 1.0, se: 1.0, sp: 1.0, acc: 1.0 });
    }

    #[test]
    fn all_background_prediction_on_mixed_target() {
        let y = [0, 1, 1, 0];
        let c = Confusion::from_labels(&[0; 4], &y, 2).unwrap();
        let fg = c.class_scores(1);
        assert_eq!(fg.dsc, 0.0);
        assert_eq!(fg.se, 0.0);
        assert_eq!(fg.sp, 1.0);
        let bg = c.class_scores(0);
        assert!((bg.dsc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_counts_as_perfect() {
        let c = Confusion::from_labels(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(c.class_scores(1).dsc, 1.0);
        assert_eq!(c.class_scores(1).se, 1.0);
    }

    #[test]
    fn pooled_counts_add() {
        let mut a = Confusion::from_labels(&[0, 1], &[1, 1], 2).unwrap();
        let b = Confusion::from_labels(&[1, 0], &[1, 0], 2).unwrap();
        a += &b;
        assert_eq!(a, Confusion::from_labels(&[0, 1, 1, 0], &[1, 1, 1, 0], 2).unwrap());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let t = Tensor::new(&[2, 1, 3], vec![1.0, 0.0, 5.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(predict(&t), vec![0, 1, 0]);
    }
}
