//! Thresholded recall/precision and average precision.

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub recall: f64,
    /// 1 when nothing is predicted positive.
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Confusion counts with `score >= tau` predicted positive.
pub fn metrics_at_threshold(scores: &[f64], labels: &[u8], tau: f64) -> Result<ThresholdMetrics, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::InvalidInput("scores and labels differ in length".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= tau, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(EvalError::NoPositives("recall is undefined".into()));
    }
    Ok(ThresholdMetrics {
        recall: tp as f64 / (tp + fn_) as f64,
        precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        tp,
        fp,
        fn_,
        tn,
    })
}

/// Average precision. Equal scores form a single threshold: every positive
/// in a tie block is credited with the precision at the end of the block.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::InvalidInput("scores and labels differ in length".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives("average precision is undefined".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut block_tp = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            block_tp += usize::from(labels[order[j]] == 1);
            j += 1;
        }
        tp += block_tp;
        seen += j - i;
        ap += block_tp as f64 * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(ap / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sweeps every distinct threshold from high to low and sums
    /// `(R_k − R_{k−1}) · P_k`.
    fn sweep_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
            let k = scores.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * (tp / k);
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn examples() {
        assert_eq!(auprc(&[0.9, 0.8], &[1, 0]).unwrap(), 1.0);
        assert!((auprc(&[0.9, 0.4, 0.8], &[1, 1, 0]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(auprc(&[0.1, 0.5, 0.3], &[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(auprc(&[0.1], &[0]), Err(EvalError::NoPositives(_))));

        let m = metrics_at_threshold(&[0.7, 0.4, 0.6], &[1, 1, 0], 0.5).unwrap();
        assert_eq!((m.recall, m.precision), (0.5, 0.5));
        let m = metrics_at_threshold(&[1.0; 4], &[1; 4], 0.5).unwrap();
        assert_eq!((m.recall, m.precision), (1.0, 1.0));
        let m = metrics_at_threshold(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(m.precision, 1.0);
    }

    #[test]
    fn matches_threshold_sweep_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..120);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..25u32)) / 25.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
            labels[0] = 1;
            let a = auprc(&scores, &labels).unwrap();
            assert!((a - sweep_oracle(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn invariant_under_monotone_transform_and_recall_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..300).map(|_| rng.random()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.random_bool(s))).collect();
        let t: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp()).collect();
        assert!((auprc(&scores, &labels).unwrap() - auprc(&t, &labels).unwrap()).abs() < 1e-12);
        let mut prev = 1.0;
        for k in 0..=20 {
            let r = metrics_at_threshold(&scores, &labels, k as f64 / 20.0).unwrap().recall;
            assert!(r <= prev);
            prev = r;
        }
    }
}
