//! Brute-force reference implementations shared by the test targets.
#![allow(dead_code)]

use scenenet::conv::anchor;
use scenenet::grid::Grid3;

/// Six nested loops with explicit bounds checks.
pub fn naive_correlation(input: &Grid3<f64>, kernel: &Grid3<f64>) -> Grid3<f64> {
    let s = input.shape();
    let k = kernel.shape();
    let a = anchor(k);
    Grid3::from_fn(s, |[z, y, x]| {
        let mut acc = 0.0;
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let iz = z as i64 + kz as i64 - a[0] as i64;
                    let iy = y as i64 + ky as i64 - a[1] as i64;
                    let ix = x as i64 + kx as i64 - a[2] as i64;
                    if let Some(v) = input.get_signed([iz, iy, ix]) {
                        acc += v * kernel.get([kz, ky, kx]);
                    }
                }
            }
        }
        acc
    })
}

/// Mean of `(ε + α·y)(p − y)²`.
pub fn naive_seg_loss(prob: &[f64], labels: &[u8], alpha: f64, epsilon: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..prob.len() {
        let y = f64::from(labels[i]);
        sum += (epsilon + alpha * y) * (prob[i] - y) * (prob[i] - y);
    }
    sum / prob.len() as f64
}

pub fn naive_tversky(prob: &[f64], labels: &[u8], a: f64, b: f64, d: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..prob.len() {
        let y = f64::from(labels[i]);
        tp += prob[i] * y;
        fp += prob[i] * (1.0 - y);
        fn_ += (1.0 - prob[i]) * y;
    }
    1.0 - (tp + d) / (tp + a * fp + b * fn_ + d)
}

/// `[tp, fp, fn, tn]` with nonzero meaning positive.
pub fn naive_confusion(pred: &[u8], truth: &[u8]) -> [u64; 4] {
    let mut c = [0u64; 4];
    for i in 0..pred.len() {
        c[usize::from(pred[i] == 0) * 2 + usize::from(truth[i] == 0)] += 1;
    }
    c
}

/// Precision at every distinct threshold times the recall gained there.
pub fn naive_average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l != 0).count();
    if pos == 0 {
        return 0.0;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let sel: Vec<usize> = (0..n).filter(|&i| scores[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| labels[i] != 0).count();
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev) * tp as f64 / sel.len() as f64;
        prev = recall;
    }
    ap
}
