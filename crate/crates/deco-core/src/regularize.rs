//! Router-entropy sparsification loss and the adaptive coefficient controller
//! that locks the activation ratio onto a target.
//!
//! Per token the scores are normalized to `p1 = |p| / sum(|p|)` and penalized
//! with `-p1 . ln(p1 + eps)`; tokens whose scores are all zero are already
//! maximally sparse and contribute nothing. The batch loss is the mean over
//! tokens.
//!
//! The coefficient update is multiplicative: when the measured sparsity falls
//! below the target the coefficient is scaled by `eta > 1`, otherwise divided
//! by it — once per optimizer step, using that step's batch activation ratio.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Epsilon inside the entropy logarithm.
pub const ENTROPY_EPS: f64 = 1e-8;

/// Adaptive sparsity controller state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatorState {
    pub lambda: f64,
    pub eta: f64,
    pub target_activation_ratio: f64,
    pub epsilon: f64,
    pub lambda_init: f64,
}

impl RegulatorState {
    pub fn new(lambda_init: f64, eta: f64, target_activation_ratio: f64) -> Self {
        RegulatorState {
            lambda: lambda_init,
            eta,
            target_activation_ratio,
            epsilon: ENTROPY_EPS,
            lambda_init,
        }
    }
}

/// Mean over tokens of the entropy of the normalized absolute router scores.
pub fn router_entropy<T: Scalar>(scores: &Tensor<T>, epsilon: f64) -> f64 {
    let n_t = scores.rows();
    let eps = epsilon;
    let mut total = 0.0;
    for t in 0..n_t {
        let row = scores.row(t);
        let mut sum_abs = 0.0;
        for &p in row {
            sum_abs += p.as_f64().abs();
        }
        if sum_abs == 0.0 {
            continue;
        }
        let mut ent = 0.0;
        for &p in row {
            let p1 = p.as_f64().abs() / sum_abs;
            ent -= p1 * (p1 + eps).ln();
        }
        total += ent;
    }
    total / n_t as f64
}

/// Gradient of [`router_entropy`] with respect to the scores.
pub fn router_entropy_backward<T: Scalar>(scores: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    let (n_t, n_e) = (scores.rows(), scores.cols());
    let mut grad = Tensor::zeros(&[n_t, n_e]);
    let inv_tokens = 1.0 / n_t as f64;
    let mut p1 = vec![0.0f64; n_e];
    let mut a = vec![0.0f64; n_e];
    for t in 0..n_t {
        let row = scores.row(t);
        let mut sum_abs = 0.0;
        for &p in row {
            sum_abs += p.as_f64().abs();
        }
        if sum_abs == 0.0 {
            continue;
        }
        let mut a_dot_p1 = 0.0;
        for e in 0..n_e {
            p1[e] = row[e].as_f64().abs() / sum_abs;
            a[e] = -((p1[e] + epsilon).ln() + p1[e] / (p1[e] + epsilon));
            a_dot_p1 += a[e] * p1[e];
        }
        let g_row = grad.row_mut(t);
        for e in 0..n_e {
            let v = row[e].as_f64();
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            g_row[e] = T::from_f64(sign * (a[e] - a_dot_p1) / sum_abs * inv_tokens);
        }
    }
    grad
}

/// One controller step: `sparsity = 1 - activation_ratio`; below-target
/// sparsity multiplies the coefficient by `eta`, otherwise it is divided.
pub fn update_lambda(state: &RegulatorState, current_activation_ratio: f64) -> RegulatorState {
    let sparsity = 1.0 - current_activation_ratio;
    let target_sparsity = 1.0 - state.target_activation_ratio;
    let mut next = *state;
    if sparsity < target_sparsity {
        next.lambda = state.lambda * state.eta;
    } else {
        next.lambda = state.lambda / state.eta;
    }
    next
}

/// `L = L_lm + lambda * L_ent`; the coefficient is not a learnable parameter.
pub fn total_loss(lm_loss: f64, ent_loss: f64, state: &RegulatorState) -> f64 {
    lm_loss + state.lambda * ent_loss
}
