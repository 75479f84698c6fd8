//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `b x d` rows drawn from an isotropic Gaussian and scaled to unit length.
pub fn unit_rows(rng: &mut impl Rng, b: usize, d: usize) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((b, d), |_| rng.sample::<f64, _>(StandardNormal));
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    z
}

/// Labels guaranteed to give at least one anchor a positive.
pub fn labels_with_a_pair(rng: &mut impl Rng, b: usize) -> Vec<usize> {
    loop {
        let k = rng.random_range(1..=b);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let has_pair = (0..b).any(|i| (0..b).any(|j| j != i && labels[j] == labels[i]));
        if has_pair {
            return labels;
        }
    }
}

fn dot(z: &Array2<f64>, i: usize, j: usize) -> f64 {
    (0..z.ncols()).map(|k| z[[i, k]] * z[[j, k]]).sum()
}

/// Eq. 1 evaluated term by term over every `(i, p, a)`, averaged over anchors
/// that have positives. Rows need not be unit length.
pub fn brute_force_supcon(z: &Array2<f64>, labels: &[usize], tau: f64) -> Option<f64> {
    let b = z.nrows();
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        used += 1;
        let mut term = 0.0;
        for &p in &positives {
            let mut denom = 0.0;
            for a in 0..b {
                if a != i {
                    denom += (dot(z, i, a) / tau).exp();
                }
            }
            term += ((dot(z, i, p) / tau).exp() / denom).ln();
        }
        total += -term / positives.len() as f64;
    }
    (used > 0).then(|| total / used as f64)
}

/// NT-Xent: row `i` is classified among all other rows, the target being its
/// partner `i ^ 1`; mean cross-entropy over the `2K` rows.
pub fn nt_xent(z: &Array2<f64>, tau: f64) -> f64 {
    let n = z.nrows();
    let sim = z.dot(&z.t()) / tau;
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sim[[i, j]]).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - sim[[i, i ^ 1]];
    }
    total / n as f64
}

/// Confusion counts by visiting every pixel once per `(t, p)` class pair.
pub fn double_loop_confusion(pairs: &[(Array2<u32>, Array2<u32>)], c: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; c]; c];
    for t in 0..c {
        for p in 0..c {
            for (pred, target) in pairs {
                for (&pv, &tv) in pred.iter().zip(target.iter()) {
                    if tv as usize == t && pv as usize == p {
                        m[t][p] += 1;
                    }
                }
            }
        }
    }
    m
}

/// Per-class IoU and mean over present classes from raw counts.
pub fn miou_from_counts(m: &[Vec<u64>]) -> (Vec<Option<f64>>, Option<f64>) {
    let c = m.len();
    let ious: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = m[k][k];
            let fnn: u64 = (0..c).filter(|&j| j != k).map(|j| m[k][j]).sum();
            let fp: u64 = (0..c).filter(|&j| j != k).map(|j| m[j][k]).sum();
            let denom = tp + fp + fnn;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().cloned().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (ious, mean)
}

/// Mean and population standard deviation in two passes.
pub fn two_pass_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
