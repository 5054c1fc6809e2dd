//! AdamW with decoupled weight decay and the warm-up/decay schedule.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoder::ModelParameters;

/// Linear ramp from 0 to `base_lr` over the warm-up, then linear decay to 0.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_proportion: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_proportion * total;
    if step < warmup {
        base_lr * step / warmup
    } else if total > warmup {
        base_lr * (total - step) / (total - warmup)
    } else {
        base_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat tensor. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
    decay: bool,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        if decay {
            theta[i] *= 1.0 - lr * hyper.weight_decay;
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + hyper.eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Applies one step to every tensor, then rounds parameters to `f32`
/// precision so the checkpoint format stores them exactly.
pub fn adamw_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    if let Some((name, _)) = grads.named().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name));
    }
    state.t += 1;
    let t = state.t;
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let decay = ModelParameters::is_decayed(&name);
        adamw_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr, hyper, decay);
    }
    params.round_to_f32();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1e-3, 0.25), 0.0);
        assert!((lr_schedule(25, 100, 1e-3, 0.25) - 1e-3).abs() < 1e-15);
        assert!((lr_schedule(62, 100, 1e-3, 0.25) - 0.5e-3 * 76.0 / 75.0).abs() < 1e-15);
        assert_eq!(lr_schedule(100, 100, 1e-3, 0.25), 0.0);
        // midpoint of the decay phase
        assert!((lr_schedule(60, 120, 2.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((lr_schedule(70, 120, 2.0, 1.0 / 6.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut theta = vec![0.3, -1.2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let hyper = AdamHyper { weight_decay: 0.0, ..Default::default() };
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &hyper, true);
        assert_eq!(theta, vec![0.3, -1.2]);
    }

    #[test]
    fn single_scalar_step() {
        let mut theta = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let hyper = AdamHyper { weight_decay: 0.0, ..Default::default() };
        adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &hyper, true);
        // m̂ = v̂ = 1
        assert!((theta[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((theta[0] + 0.0999999).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut theta = vec![2.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let hyper = AdamHyper::default();
        for t in 1..=5 {
            adamw_update(&mut theta, &[0.0], &mut m, &mut v, t, 0.1, &hyper, true);
        }
        assert!((theta[0] - 2.0 * (1.0 - 0.1 * 0.01f64).powi(5)).abs() < 1e-15);
        let mut undecayed = vec![2.0];
        adamw_update(&mut undecayed, &[0.0], &mut m, &mut v, 6, 0.1, &hyper, false);
        assert_eq!(undecayed, vec![2.0]);
    }
}
