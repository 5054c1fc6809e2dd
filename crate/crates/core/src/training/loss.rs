//! Weighted multi-label BCE and masked-token cross-entropy.

use super::TrainError;
use crate::encoder::tensor::Mat;
use crate::encoder::sigmoid;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(z)`
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `ln(1 − σ(z))`
#[inline]
pub fn log_one_minus_sigmoid(z: f64) -> f64 {
    -softplus(z)
}

fn check_row(z: &[f64], y: &[u8], omega: &[u8], rho: &[f64]) -> Result<(), TrainError> {
    let d = z.len();
    if y.len() != d || omega.len() != d || rho.len() != d || d == 0 {
        return Err(TrainError::DimensionMismatch(format!(
            "z {d}, y {}, omega {}, rho {}",
            y.len(),
            omega.len(),
            rho.len()
        )));
    }
    Ok(())
}

/// Per-sample loss and its gradient with respect to the logits.
pub fn weighted_bce_sample(
    z: &[f64],
    y: &[u8],
    omega: &[u8],
    rho: &[f64],
) -> Result<(f64, Vec<f64>), TrainError> {
    check_row(z, y, omega, rho)?;
    let d = z.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for k in 0..z.len() {
        if omega[k] == 0 {
            continue;
        }
        let w = f64::from(omega[k]);
        if y[k] == 1 {
            loss -= w * rho[k] * log_sigmoid(z[k]);
            grad[k] = w * rho[k] * (sigmoid(z[k]) - 1.0) / d;
        } else {
            loss -= w * log_one_minus_sigmoid(z[k]);
            grad[k] = w * sigmoid(z[k]) / d;
        }
    }
    Ok((loss / d, grad))
}

/// Mean over the batch of the per-sample phenotype-averaged weighted BCE.
pub fn weighted_bce_loss(
    z: &[Vec<f64>],
    y: &[Vec<u8>],
    omega: &[Vec<u8>],
    rho: &[f64],
) -> Result<f64, TrainError> {
    if z.len() != y.len() || z.len() != omega.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "batch sizes z {}, y {}, omega {}",
            z.len(),
            y.len(),
            omega.len()
        )));
    }
    if z.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((zi, yi), oi) in z.iter().zip(y).zip(omega) {
        total += weighted_bce_sample(zi, yi, oi, rho)?.0;
    }
    Ok(total / z.len() as f64)
}

/// Sum of token cross-entropies over labelled rows, the number of labelled
/// rows, and the gradient of the sum with respect to `logits`.
pub fn mlm_loss_sum(logits: &Mat, labels: &[Option<u32>]) -> (f64, usize, Mat) {
    assert_eq!(logits.rows, labels.len(), "one label slot per logit row");
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let mut count = 0;
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        total += max + sum.ln() - row[label as usize];
        count += 1;
        let g = grad.row_mut(r);
        for (gc, x) in g.iter_mut().zip(row) {
            *gc = (x - max).exp() / sum;
        }
        g[label as usize] -= 1.0;
    }
    (total, count, grad)
}

/// Mean cross-entropy over labelled rows; zero (with a warning) when none are.
pub fn mlm_loss(logits: &Mat, labels: &[Option<u32>]) -> f64 {
    let (total, count, _) = mlm_loss_sum(logits, labels);
    if count == 0 {
        log::warn!("MLM loss over zero selected positions");
        return 0.0;
    }
    total / count as f64
}
