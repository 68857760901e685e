//! Per-token expert selection.
//!
//! Three router families:
//! * ReLU routing with learnable expert-wise scaling factors — the score for
//!   expert `e` is `alpha[e] * max(0, w_e . x)`, and the expert is active
//!   whenever the pre-scaling ReLU output is positive. Fully differentiable;
//!   [`route_relu_backward`] is the analytic backward pass.
//! * TopK: sigmoid scores, fixed `k` experts per token, selected weights
//!   normalized to unit sum and multiplied by a fixed scalar scale.
//! * TopP: softmax scores accumulated in descending order until the cumulative
//!   mass reaches the threshold; selected weights are the raw softmax values
//!   (not renormalized among the selected set).
//!
//! An expert with a positive logit counts as active even when its scaling
//! factor is zero: compute is gated by the ReLU, not by the scaling, so the
//! activation ratio always means "fraction of experts computed".

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_accum, sigmoid_scalar, softmax_in_place, NumericsError, Scalar, Tensor};

/// How the learnable scaling vector of the ReLU router is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Constant factor for every expert; receives no gradient.
    Fixed,
    /// One learnable scalar shared by all experts (entries kept in lockstep).
    Scalar,
    /// Independent learnable factor per expert.
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouterKind {
    Relu { scaling: ScalingMode },
    TopK { k: usize, fixed_scale: f64 },
    TopP { threshold: f64 },
}

/// Router weights. `weight` is `[d_h, N_e]` (one column per expert);
/// `alpha` is the `[N_e]` scaling vector used by the ReLU kind.
#[derive(Debug, Clone)]
pub struct RouterParams<T> {
    pub weight: Tensor<T>,
    pub alpha: Tensor<T>,
    pub kind: RouterKind,
}

impl<T: Scalar> RouterParams<T> {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let n_e = self.num_experts();
        if n_e < 1 {
            return Err(NumericsError::Invalid("router needs at least one expert".into()));
        }
        if self.alpha.len() != n_e {
            return Err(NumericsError::Invalid(format!(
                "alpha length {} != expert count {n_e}",
                self.alpha.len()
            )));
        }
        if !self.alpha.all_finite() || !self.weight.all_finite() {
            return Err(NumericsError::NonFinite {
                context: "router parameters".into(),
            });
        }
        match self.kind {
            RouterKind::TopK { k, .. } if k < 1 || k > n_e => Err(NumericsError::Invalid(
                format!("topk k={k} outside 1..={n_e}"),
            )),
            RouterKind::TopP { threshold } if !(threshold > 0.0 && threshold <= 1.0) => Err(
                NumericsError::Invalid(format!("topp threshold {threshold} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Routing outcome for one batch of tokens.
#[derive(Debug, Clone)]
pub struct RouterDecision<T> {
    /// Final weights multiplied into expert outputs, `[N_t, N_e]`; zero
    /// exactly where `active` is false.
    pub scores: Tensor<T>,
    /// Active mask, row-major `[N_t, N_e]`.
    pub active: Vec<bool>,
    /// Mean of `active` over the batch.
    pub activation_ratio: f64,
}

impl<T: Scalar> RouterDecision<T> {
    pub fn num_tokens(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn is_active(&self, token: usize, expert: usize) -> bool {
        self.active[token * self.num_experts() + expert]
    }

    /// Active expert indices of one token, ascending.
    pub fn active_experts(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        let n_e = self.num_experts();
        self.active[token * n_e..(token + 1) * n_e]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(e, _)| e)
    }
}

fn activation_ratio(active: &[bool]) -> f64 {
    if active.is_empty() {
        return 0.0;
    }
    active.iter().filter(|&&a| a).count() as f64 / active.len() as f64
}

/// Pre-activation state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ReluRouterTrace<T> {
    /// Router logits `x . W`, `[N_t, N_e]`, before ReLU and scaling.
    pub logits: Tensor<T>,
}

fn router_logits<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>) -> Tensor<T> {
    let n_t = x.rows();
    let (d_h, n_e) = (params.hidden_dim(), params.num_experts());
    debug_assert_eq!(x.cols(), d_h);
    let mut logits = Tensor::zeros(&[n_t, n_e]);
    matmul_accum(x.data(), params.weight.data(), n_t, d_h, n_e, logits.data_mut());
    logits
}

pub fn route_relu<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>) -> RouterDecision<T> {
    route_relu_traced(x, params).0
}

pub fn route_relu_traced<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
) -> (RouterDecision<T>, ReluRouterTrace<T>) {
    debug_assert!(matches!(params.kind, RouterKind::Relu { .. }));
    let logits = router_logits(x, params);
    let (n_t, n_e) = (logits.rows(), logits.cols());
    let mut scores = Tensor::zeros(&[n_t, n_e]);
    let mut active = vec![false; n_t * n_e];
    for t in 0..n_t {
        for e in 0..n_e {
            let l = logits.data()[t * n_e + e];
            if l > T::zero() {
                active[t * n_e + e] = true;
                scores.data_mut()[t * n_e + e] = params.alpha.data()[e] * l;
            }
        }
    }
    let ratio = activation_ratio(&active);
    (
        RouterDecision {
            scores,
            active,
            activation_ratio: ratio,
        },
        ReluRouterTrace { logits },
    )
}

#[derive(Debug, Clone)]
pub struct RouterGrads<T> {
    pub weight: Tensor<T>,
    pub alpha: Tensor<T>,
}

/// Backward pass of [`route_relu`]. Returns `grad_x` and parameter gradients.
///
/// The ReLU sub-gradient at exactly zero is zero, so units sitting on the kink
/// pass no gradient. Under `ScalingMode::Scalar` the per-expert alpha
/// gradients are summed and broadcast so the shared entries stay in lockstep;
/// under `ScalingMode::Fixed` they are zeroed.
pub fn route_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
    trace: &ReluRouterTrace<T>,
    grad_scores: &Tensor<T>,
) -> (Tensor<T>, RouterGrads<T>) {
    let (n_t, n_e) = (trace.logits.rows(), trace.logits.cols());
    let d_h = params.hidden_dim();
    let mut grad_alpha = Tensor::zeros(&[n_e]);
    let mut grad_logits = Tensor::zeros(&[n_t, n_e]);
    for t in 0..n_t {
        for e in 0..n_e {
            let idx = t * n_e + e;
            let l = trace.logits.data()[idx];
            if l > T::zero() {
                let g = grad_scores.data()[idx];
                grad_alpha.data_mut()[e] += l * g;
                grad_logits.data_mut()[idx] = params.alpha.data()[e] * g;
            }
        }
    }
    match params.kind {
        RouterKind::Relu {
            scaling: ScalingMode::Fixed,
        } => grad_alpha.fill(T::zero()),
        RouterKind::Relu {
            scaling: ScalingMode::Scalar,
        } => {
            let mut total = T::zero();
            for &g in grad_alpha.data() {
                total += g;
            }
            grad_alpha.fill(total);
        }
        _ => {}
    }

    let mut grad_weight = Tensor::zeros(&[d_h, n_e]);
    crate::tensor::matmul_accum_at(
        x.data(),
        grad_logits.data(),
        n_t,
        d_h,
        n_e,
        grad_weight.data_mut(),
    );
    let mut grad_x = Tensor::zeros(&[n_t, d_h]);
    crate::tensor::matmul_accum_bt(
        grad_logits.data(),
        params.weight.data(),
        n_t,
        d_h,
        n_e,
        grad_x.data_mut(),
    );
    (grad_x, RouterGrads {
        weight: grad_weight,
        alpha: grad_alpha,
    })
}

/// Sigmoid scores, fixed `k` experts per token (ties broken by lower index),
/// selected weights normalized to unit sum and scaled by `fixed_scale`.
pub fn route_topk<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>) -> RouterDecision<T> {
    let RouterKind::TopK { k, fixed_scale } = params.kind else {
        panic!("route_topk called with non-topk router");
    };
    let logits = router_logits(x, params);
    let (n_t, n_e) = (logits.rows(), logits.cols());
    let mut scores = Tensor::zeros(&[n_t, n_e]);
    let mut active = vec![false; n_t * n_e];
    let scale = T::from_f64(fixed_scale);
    let mut order: Vec<usize> = Vec::with_capacity(n_e);
    for t in 0..n_t {
        let s: Vec<T> = logits.row(t).iter().map(|&l| sigmoid_scalar(l)).collect();
        order.clear();
        order.extend(0..n_e);
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let selected = &order[..k];
        let mut sum = T::zero();
        for &e in selected {
            sum += s[e];
        }
        for &e in selected {
            active[t * n_e + e] = true;
            scores.data_mut()[t * n_e + e] = s[e] / sum * scale;
        }
    }
    RouterDecision {
        scores,
        active,
        // Exactly k/N_e for every batch by construction.
        activation_ratio: k as f64 / n_e as f64,
    }
}

/// Softmax scores accumulated in descending order (ties broken by lower
/// index) until the cumulative score reaches the threshold. Selected experts
/// keep their raw softmax weights.
pub fn route_topp<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>) -> RouterDecision<T> {
    let RouterKind::TopP { threshold } = params.kind else {
        panic!("route_topp called with non-topp router");
    };
    let mut logits = router_logits(x, params);
    let (n_t, n_e) = (logits.rows(), logits.cols());
    let mut scores = Tensor::zeros(&[n_t, n_e]);
    let mut active = vec![false; n_t * n_e];
    let p = T::from_f64(threshold);
    let mut order: Vec<usize> = Vec::with_capacity(n_e);
    for t in 0..n_t {
        let q = logits.row_mut(t);
        softmax_in_place(q);
        order.clear();
        order.extend(0..n_e);
        order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
        let mut cum = T::zero();
        for &e in &order {
            active[t * n_e + e] = true;
            scores.data_mut()[t * n_e + e] = q[e];
            cum += q[e];
            if cum >= p {
                break;
            }
        }
    }
    let ratio = activation_ratio(&active);
    RouterDecision {
        scores,
        active,
        activation_ratio: ratio,
    }
}

/// Routes with whichever kind `params` carries.
pub fn route<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>) -> RouterDecision<T> {
    match params.kind {
        RouterKind::Relu { .. } => route_relu(x, params),
        RouterKind::TopK { .. } => route_topk(x, params),
        RouterKind::TopP { .. } => route_topp(x, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, DEFAULT_H};
    use crate::rng::{init_normal, RngState};

    fn relu_params(d_h: usize, n_e: usize, seed: u64) -> RouterParams<f64> {
        let rng = RngState::new(seed);
        RouterParams {
            weight: init_normal(&[d_h, n_e], 0.5, &rng.split("w")).unwrap(),
            alpha: Tensor::full(&[n_e], 0.1),
            kind: RouterKind::Relu {
                scaling: ScalingMode::Vector,
            },
        }
    }

    #[test]
    fn relu_zero_input_routes_nothing() {
        let params = relu_params(4, 3, 1);
        let x = Tensor::<f64>::zeros(&[5, 4]);
        let d = route_relu(&x, &params);
        assert_eq!(d.activation_ratio, 0.0);
        assert!(d.scores.data().iter().all(|&v| v == 0.0));
        assert!(d.active.iter().all(|&a| !a));
    }

    #[test]
    fn relu_hand_example() {
        // d_h=2, N_e=2, x=(1,2), columns (1,1) and (-1,1), alpha=(0.5,2).
        let params = RouterParams {
            weight: Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 1.0, 1.0]).unwrap(),
            alpha: Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap(),
            kind: RouterKind::Relu {
                scaling: ScalingMode::Vector,
            },
        };
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let d = route_relu(&x, &params);
        assert!((d.scores.data()[0] - 1.5).abs() < 1e-12);
        assert!((d.scores.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(d.activation_ratio, 1.0);
    }

    #[test]
    fn relu_all_negative_logits_inactive() {
        let params = RouterParams {
            weight: Tensor::from_vec(&[2, 2], vec![-1.0, -2.0, -1.0, -1.0]).unwrap(),
            alpha: Tensor::full(&[2], 0.1),
            kind: RouterKind::Relu {
                scaling: ScalingMode::Vector,
            },
        };
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let d = route_relu(&x, &params);
        assert_eq!(d.activation_ratio, 0.0);
    }

    #[test]
    fn relu_alpha_zero_still_active() {
        let params = RouterParams {
            weight: Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
            alpha: Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(),
            kind: RouterKind::Relu {
                scaling: ScalingMode::Vector,
            },
        };
        let x = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let d = route_relu(&x, &params);
        assert!(d.is_active(0, 0), "zero alpha must not mask activity");
        assert_eq!(d.scores.data()[0], 0.0);
        assert_eq!(d.activation_ratio, 1.0);
    }

    #[test]
    fn relu_scores_nonzero_implies_active() {
        let params = relu_params(6, 8, 3);
        let x = init_normal::<f64>(&[10, 6], 1.0, &RngState::new(4)).unwrap();
        let d = route_relu(&x, &params);
        for t in 0..10 {
            for e in 0..8 {
                if d.scores.data()[t * 8 + e] != 0.0 {
                    assert!(d.is_active(t, e));
                }
            }
        }
    }

    #[test]
    fn relu_ratio_varies_across_tokens_at_init() {
        let params = relu_params(8, 16, 5);
        let x = init_normal::<f64>(&[64, 8], 1.0, &RngState::new(6)).unwrap();
        let d = route_relu(&x, &params);
        let n_e = 16;
        let counts: Vec<usize> = (0..64)
            .map(|t| d.active[t * n_e..(t + 1) * n_e].iter().filter(|&&a| a).count())
            .collect();
        let first = counts[0];
        assert!(
            counts.iter().any(|&c| c != first),
            "token-dependent activation expected, got uniform {first}"
        );
    }

    /// Resamples until every logit is clear of the ReLU kink.
    fn sample_away_from_kink(
        d_h: usize,
        n_e: usize,
        n_t: usize,
        seed: u64,
    ) -> (Tensor<f64>, RouterParams<f64>) {
        for attempt in 0..100 {
            let params = relu_params(d_h, n_e, seed + attempt * 1000);
            let x = init_normal::<f64>(&[n_t, d_h], 1.0, &RngState::new(seed + attempt * 7 + 1)).unwrap();
            let logits = router_logits(&x, &params);
            if logits.data().iter().all(|l| l.abs() > 1e-3) {
                return (x, params);
            }
        }
        panic!("could not sample logits away from the kink");
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let (x, mut params) = sample_away_from_kink(5, 7, 4, 11);
        let rng = RngState::new(99);
        let g = init_normal::<f64>(&[4, 7], 1.0, &rng).unwrap();

        let (decision, trace) = route_relu_traced(&x, &params);
        let _ = decision;
        let (_, grads) = route_relu_backward(&x, &params, &trace, &g);

        let alpha0 = params.alpha.clone();
        let weight0 = params.weight.clone();
        let mut named = vec![
            ("weight".to_string(), weight0),
            ("alpha".to_string(), alpha0),
        ];
        let analytic = vec![
            ("weight".to_string(), grads.weight),
            ("alpha".to_string(), grads.alpha),
        ];
        let kind = params.kind.clone();
        let x2 = x.clone();
        let g2 = g.clone();
        let report = finite_diff_grad(
            move |p| {
                let trial = RouterParams {
                    weight: p[0].1.clone(),
                    alpha: p[1].1.clone(),
                    kind: kind.clone(),
                };
                let d = route_relu(&x2, &trial);
                d.scores
                    .data()
                    .iter()
                    .zip(g2.data())
                    .map(|(s, gv)| s * gv)
                    .sum()
            },
            &mut named,
            &analytic,
            DEFAULT_H,
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{report}");

        // grad_x against finite differences, perturbing the input instead.
        let (grad_x, _) = route_relu_backward(&x, &params, &trace, &g);
        let mut named_x = vec![("x".to_string(), x.clone())];
        let analytic_x = vec![("x".to_string(), grad_x)];
        let params2 = RouterParams {
            weight: params.weight.clone(),
            alpha: params.alpha.clone(),
            kind: params.kind.clone(),
        };
        let g3 = g.clone();
        let report = finite_diff_grad(
            move |p| {
                let d = route_relu(&p[0].1, &params2);
                d.scores
                    .data()
                    .iter()
                    .zip(g3.data())
                    .map(|(s, gv)| s * gv)
                    .sum()
            },
            &mut named_x,
            &analytic_x,
            DEFAULT_H,
            1e-6,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{report}");
        params.alpha.fill(0.1);
    }

    #[test]
    fn relu_backward_zero_upstream_and_kink() {
        let params = RouterParams {
            weight: Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
            alpha: Tensor::full(&[2], 0.5),
            kind: RouterKind::Relu {
                scaling: ScalingMode::Vector,
            },
        };
        let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (_, trace) = route_relu_traced(&x, &params);
        let zero_g = Tensor::zeros(&[1, 2]);
        let (gx, grads) = route_relu_backward(&x, &params, &trace, &zero_g);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.alpha.data().iter().all(|&v| v == 0.0));

        // A logit exactly at zero passes no gradient.
        let x0 = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let (_, trace0) = route_relu_traced(&x0, &params);
        let g = Tensor::full(&[1, 2], 1.0);
        let (gx0, grads0) = route_relu_backward(&x0, &params, &trace0, &g);
        assert!(gx0.data().iter().all(|&v| v == 0.0));
        assert!(grads0.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads0.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_and_fixed_scaling_gradients() {
        let (x, base) = sample_away_from_kink(4, 5, 3, 21);
        let g = init_normal::<f64>(&[3, 5], 1.0, &RngState::new(22)).unwrap();
        let (_, trace) = route_relu_traced(&x, &base);
        let (_, vector_grads) = route_relu_backward(&x, &base, &trace, &g);

        let scalar = RouterParams {
            kind: RouterKind::Relu {
                scaling: ScalingMode::Scalar,
            },
            ..base.clone()
        };
        let (_, sg) = route_relu_backward(&x, &scalar, &trace, &g);
        let total: f64 = vector_grads.alpha.data().iter().sum();
        for &v in sg.alpha.data() {
            assert!((v - total).abs() < 1e-12, "scalar mode broadcasts the summed grad");
        }

        let fixed = RouterParams {
            kind: RouterKind::Relu {
                scaling: ScalingMode::Fixed,
            },
            ..base
        };
        let (_, fg) = route_relu_backward(&x, &fixed, &trace, &g);
        assert!(fg.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_hand_example() {
        // Want sigmoid scores (0.2, 0.5, 0.3): feed logits through inverse sigmoid.
        let inv = |p: f64| (p / (1.0 - p)).ln();
        let params = RouterParams {
            weight: Tensor::from_vec(&[1, 3], vec![inv(0.2), inv(0.5), inv(0.3)]).unwrap(),
            alpha: Tensor::full(&[3], 1.0),
            kind: RouterKind::TopK {
                k: 2,
                fixed_scale: 2.5,
            },
        };
        let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let d = route_topk(&x, &params);
        assert!(!d.is_active(0, 0));
        assert!(d.is_active(0, 1));
        assert!(d.is_active(0, 2));
        assert!((d.scores.data()[1] - 0.625 * 2.5).abs() < 1e-9);
        assert!((d.scores.data()[2] - 0.375 * 2.5).abs() < 1e-9);
        assert_eq!(d.activation_ratio, 2.0 / 3.0);
    }

    #[test]
    fn topk_full_k_and_ties() {
        let params = RouterParams {
            weight: Tensor::from_vec(&[1, 3], vec![0.3, 0.2, 0.1]).unwrap(),
            alpha: Tensor::full(&[3], 1.0),
            kind: RouterKind::TopK {
                k: 3,
                fixed_scale: 1.0,
            },
        };
        let x = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let d = route_topk(&x, &params);
        assert!(d.active.iter().all(|&a| a));
        let sum: f64 = d.scores.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        // All-equal logits select the first k by index.
        let tie = RouterParams {
            weight: Tensor::from_vec(&[1, 4], vec![0.5; 4]).unwrap(),
            alpha: Tensor::full(&[4], 1.0),
            kind: RouterKind::TopK {
                k: 2,
                fixed_scale: 1.0,
            },
        };
        let d = route_topk(&x, &tie);
        assert!(d.is_active(0, 0) && d.is_active(0, 1));
        assert!(!d.is_active(0, 2) && !d.is_active(0, 3));
    }

    #[test]
    fn topk_ratio_exact_and_scale_invariant_selection() {
        let rng = RngState::new(31);
        let params = RouterParams {
            weight: init_normal::<f64>(&[6, 10], 1.0, &rng.split("w")).unwrap(),
            alpha: Tensor::full(&[10], 1.0),
            kind: RouterKind::TopK {
                k: 3,
                fixed_scale: 1.0,
            },
        };
        let x = init_normal::<f64>(&[20, 6], 1.0, &rng.split("x")).unwrap();
        let d = route_topk(&x, &params);
        assert_eq!(d.activation_ratio, 0.3);

        let mut x_scaled = x.clone();
        x_scaled.scale(3.7);
        let d2 = route_topk(&x_scaled, &params);
        assert_eq!(d.active, d2.active, "positive input scaling keeps the selected set");
    }

    #[test]
    fn topp_examples() {
        // threshold 1.0 activates everything.
        let rng = RngState::new(41);
        let mut params = RouterParams {
            weight: init_normal::<f64>(&[4, 5], 1.0, &rng.split("w")).unwrap(),
            alpha: Tensor::full(&[5], 1.0),
            kind: RouterKind::TopP { threshold: 1.0 },
        };
        let x = init_normal::<f64>(&[7, 4], 1.0, &rng.split("x")).unwrap();
        let d = route_topp(&x, &params);
        assert!(d.active.iter().all(|&a| a));

        // q = (0.6, 0.3, 0.1), p = 0.7 -> experts {0, 1}.
        params.weight = Tensor::from_vec(&[1, 3], vec![0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]).unwrap();
        params.kind = RouterKind::TopP { threshold: 0.7 };
        let x1 = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let d = route_topp(&x1, &params);
        assert!(d.is_active(0, 0) && d.is_active(0, 1) && !d.is_active(0, 2));
        assert!((d.scores.data()[0] - 0.6).abs() < 1e-9);
        assert!((d.scores.data()[1] - 0.3).abs() < 1e-9);

        // Near one-hot distribution with p=0.9 activates exactly one expert.
        params.weight = Tensor::from_vec(&[1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        params.kind = RouterKind::TopP { threshold: 0.9 };
        let d = route_topp(&x1, &params);
        assert_eq!(d.active.iter().filter(|&&a| a).count(), 1);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut p = relu_params(2, 3, 50);
        assert!(p.validate().is_ok());
        p.kind = RouterKind::TopK {
            k: 4,
            fixed_scale: 1.0,
        };
        assert!(p.validate().is_err());
        p.kind = RouterKind::TopP { threshold: 0.0 };
        assert!(p.validate().is_err());
    }
}
