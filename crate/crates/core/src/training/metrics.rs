use std::ops::AddAssign;

use crate::error::{Error, Result};

/// Confusion counts and the ratios derived from them. Every ratio uses the
/// `0/0 → 0` convention.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    /// Compare binary predictions with binary truth (nonzero = positive).
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                actual: pred.len(),
            });
        }
        let mut m = Metrics::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
        Ok(m)
    }

    /// Like [`Metrics::from_masks`] but only over voxels whose occupancy is
    /// nonzero, i.e. the voxels that carry points.
    pub fn from_occupied(pred: &[u8], truth: &[u8], occupancy: &[f64]) -> Result<Self> {
        if occupancy.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                actual: occupancy.len(),
            });
        }
        let keep: Vec<usize> = (0..occupancy.len()).filter(|&i| occupancy[i] != 0.0).collect();
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                actual: pred.len(),
            });
        }
        let p: Vec<u8> = keep.iter().map(|&i| pred[i]).collect();
        let t: Vec<u8> = keep.iter().map(|&i| truth[i]).collect();
        Self::from_masks(&p, &t)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        let p = self.precision();
        let r = self.recall();
        let b2 = beta * beta;
        let den = b2 * p + r;
        if den == 0.0 {
            0.0
        } else {
            (1.0 + b2) * p * r / den
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for Metrics {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl std::iter::Sum for Metrics {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut m = Metrics::default();
        for x in iter {
            m += x;
        }
        m
    }
}
