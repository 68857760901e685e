//! The FFN-replacement block: router + routed experts + always-on shared
//! expert, plus the dense SwiGLU FFN used as baseline and as the first layer,
//! parameter counting, and the matched-budget dense width solver.
//!
//! The block excludes the residual connection and pre-norm; those live in the
//! LM harness, keeping this a pure FFN replacement with a small gradcheck
//! surface.

use serde::{Deserialize, Serialize};

use crate::experts::{
    expert_backward, expert_forward, expert_forward_with_wbar, gated_mlp_backward,
    gated_mlp_forward, ActivationKind, ExpertForward, ExpertGrads, ExpertParams, ExpertTrace,
    GatedMlpForward, GatedMlpGrads, GatedMlpParams, GatingKind,
};
use crate::rng::{init_normal, RngState};
use crate::routing::{
    route_relu_backward, route_relu_traced, route_topk, route_topp, ReluRouterTrace,
    RouterDecision, RouterGrads, RouterKind, RouterParams, ScalingMode,
};
use crate::tensor::{NumericsError, Scalar, Tensor};

/// Projection weight init; the scaling vector default follows the sweep
/// optimum of the architecture.
pub const WEIGHT_INIT_STD: f64 = 0.02;
pub const DEFAULT_ALPHA_INIT: f64 = 0.1;

fn default_alpha_init() -> f64 {
    DEFAULT_ALPHA_INIT
}

fn default_fixed_scale() -> f64 {
    1.0
}

/// Router selection, config-level view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterConfig {
    Relu {
        scaling: ScalingMode,
        #[serde(default = "default_alpha_init")]
        alpha_init: f64,
    },
    Topk {
        k: usize,
        #[serde(default = "default_fixed_scale")]
        fixed_scale: f64,
    },
    Topp {
        threshold: f64,
    },
}

impl RouterConfig {
    pub fn kind(&self) -> RouterKind {
        match *self {
            RouterConfig::Relu { scaling, .. } => RouterKind::Relu { scaling },
            RouterConfig::Topk { k, fixed_scale } => RouterKind::TopK { k, fixed_scale },
            RouterConfig::Topp { threshold } => RouterKind::TopP { threshold },
        }
    }
}

/// Architectural hyperparameters of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub expert_dim: usize,
    pub shared_dim: usize,
    pub router: RouterConfig,
    pub activation: ActivationKind,
    pub gating: GatingKind,
    pub target_activation_ratio: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            num_experts: 16,
            expert_dim: 8,
            shared_dim: 16,
            router: RouterConfig::Relu {
                scaling: ScalingMode::Vector,
                alpha_init: DEFAULT_ALPHA_INIT,
            },
            activation: ActivationKind::Normsilu,
            gating: GatingKind::NonGated,
            target_activation_ratio: 0.2,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.num_experts < 1 || self.expert_dim < 1 || self.shared_dim < 1 {
            return Err(NumericsError::Invalid(
                "num_experts, expert_dim and shared_dim must all be >= 1".into(),
            ));
        }
        if !(self.target_activation_ratio > 0.0 && self.target_activation_ratio < 1.0) {
            return Err(NumericsError::Invalid(format!(
                "target_activation_ratio {} outside (0, 1)",
                self.target_activation_ratio
            )));
        }
        match self.router {
            RouterConfig::Topk { k, .. } if k < 1 || k > self.num_experts => {
                Err(NumericsError::Invalid(format!(
                    "topk k={k} outside 1..={}",
                    self.num_experts
                )))
            }
            RouterConfig::Topp { threshold } if !(threshold > 0.0 && threshold <= 1.0) => Err(
                NumericsError::Invalid(format!("topp threshold {threshold} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// One MoE layer's learnable state.
#[derive(Debug, Clone)]
pub struct MoeBlockParams<T> {
    pub router: RouterParams<T>,
    pub experts: ExpertParams<T>,
    pub shared: GatedMlpParams<T>,
    pub config: MoeConfig,
}

impl<T: Scalar> MoeBlockParams<T> {
    /// Initializes a block from its config; all draws come from named
    /// sub-streams of `rng`.
    pub fn init(hidden_dim: usize, config: &MoeConfig, rng: &RngState) -> Result<Self, NumericsError> {
        config.validate()?;
        let n_e = config.num_experts;
        let d_e = config.expert_dim;
        let d_s = config.shared_dim;
        let alpha_init = match config.router {
            RouterConfig::Relu { alpha_init, .. } => alpha_init,
            _ => 1.0,
        };
        let router = RouterParams {
            weight: init_normal(&[hidden_dim, n_e], WEIGHT_INIT_STD, &rng.split("router.weight"))?,
            alpha: Tensor::full(&[n_e], T::from_f64(alpha_init)),
            kind: config.router.kind(),
        };
        let experts = ExpertParams {
            up: init_normal(&[n_e, hidden_dim, d_e], WEIGHT_INIT_STD, &rng.split("experts.up"))?,
            down: init_normal(&[n_e, d_e, hidden_dim], WEIGHT_INIT_STD, &rng.split("experts.down"))?,
            gate: match config.gating {
                GatingKind::Gated => Some(init_normal(
                    &[n_e, hidden_dim, d_e],
                    WEIGHT_INIT_STD,
                    &rng.split("experts.gate"),
                )?),
                GatingKind::NonGated => None,
            },
            rms_weight: Tensor::full(&[d_e], T::one()),
            activation: config.activation,
            gating: config.gating,
        };
        let shared = GatedMlpParams {
            gate: init_normal(&[hidden_dim, d_s], WEIGHT_INIT_STD, &rng.split("shared.gate"))?,
            up: init_normal(&[hidden_dim, d_s], WEIGHT_INIT_STD, &rng.split("shared.up"))?,
            down: init_normal(&[d_s, hidden_dim], WEIGHT_INIT_STD, &rng.split("shared.down"))?,
        };
        let block = MoeBlockParams {
            router,
            experts,
            shared,
            config: config.clone(),
        };
        block.validate()?;
        Ok(block)
    }

    pub fn hidden_dim(&self) -> usize {
        self.router.hidden_dim()
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        self.router.validate()?;
        self.experts.validate()?;
        let d_h = self.hidden_dim();
        if self.experts.hidden_dim() != d_h || self.shared.dims().0 != d_h {
            return Err(NumericsError::Invalid(
                "hidden dim mismatch between router, experts and shared expert".into(),
            ));
        }
        if self.router.num_experts() != self.experts.num_experts() {
            return Err(NumericsError::Invalid(
                "expert count mismatch between router and experts".into(),
            ));
        }
        Ok(())
    }
}

/// Forward state of one MoE block evaluation.
#[derive(Debug, Clone)]
pub struct MoeForward<T> {
    pub y: Tensor<T>,
    pub decision: RouterDecision<T>,
    pub router_trace: Option<ReluRouterTrace<T>>,
    pub expert: ExpertForward<T>,
    pub shared: GatedMlpForward<T>,
}

impl<T: Scalar> MoeForward<T> {
    pub fn expert_trace(&self) -> &ExpertTrace<T> {
        &self.expert.trace
    }
}

/// `y = shared_expert(x) + routed_expert_sum(x)`, with the routing decision
/// and expert trace surfaced for regularization and telemetry.
pub fn moe_forward<T: Scalar>(x: &Tensor<T>, params: &MoeBlockParams<T>) -> MoeForward<T> {
    let (decision, router_trace) = match params.router.kind {
        RouterKind::Relu { .. } => {
            let (d, t) = route_relu_traced(x, &params.router);
            (d, Some(t))
        }
        RouterKind::TopK { .. } => (route_topk(x, &params.router), None),
        RouterKind::TopP { .. } => (route_topp(x, &params.router), None),
    };
    moe_forward_with_decision(x, params, decision, router_trace, None)
}

/// Forward with a caller-provided decision (inference path with a cached
/// cross-expert mean, or test hooks that force an active set).
pub fn moe_forward_with_decision<T: Scalar>(
    x: &Tensor<T>,
    params: &MoeBlockParams<T>,
    decision: RouterDecision<T>,
    router_trace: Option<ReluRouterTrace<T>>,
    cached_wbar: Option<&Tensor<T>>,
) -> MoeForward<T> {
    let expert = match cached_wbar {
        Some(wbar) => expert_forward_with_wbar(x, &decision, &params.experts, wbar),
        None => expert_forward(x, &decision, &params.experts),
    };
    let shared = gated_mlp_forward(x, &params.shared);
    let mut y = shared.y.clone();
    for (yv, &ev) in y.data_mut().iter_mut().zip(expert.y.data()) {
        *yv += ev;
    }
    MoeForward {
        y,
        decision,
        router_trace,
        expert,
        shared,
    }
}

#[derive(Debug, Clone)]
pub struct MoeBlockGrads<T> {
    pub router: RouterGrads<T>,
    pub experts: ExpertGrads<T>,
    pub shared: GatedMlpGrads<T>,
}

/// Backward through shared expert, routed experts and router.
///
/// `extra_score_grad`, when present, is added to the score gradients coming
/// from the expert outputs before the router backward runs — this is how the
/// sparsity regularizer reaches the router parameters.
pub fn moe_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &MoeBlockParams<T>,
    fwd: &MoeForward<T>,
    dy: &Tensor<T>,
    extra_score_grad: Option<&Tensor<T>>,
) -> (Tensor<T>, MoeBlockGrads<T>) {
    let (mut grad_x, shared_grads) = gated_mlp_backward(x, &params.shared, &fwd.shared, dy);
    let (gx_experts, expert_grads, mut grad_scores) =
        expert_backward(x, &fwd.decision, &params.experts, &fwd.expert, dy);
    for (g, &e) in grad_x.data_mut().iter_mut().zip(gx_experts.data()) {
        *g += e;
    }
    if let Some(extra) = extra_score_grad {
        for (g, &e) in grad_scores.data_mut().iter_mut().zip(extra.data()) {
            *g += e;
        }
    }
    let trace = fwd
        .router_trace
        .as_ref()
        .expect("moe_backward requires a differentiable (relu) router");
    let (gx_router, router_grads) = route_relu_backward(x, &params.router, trace, &grad_scores);
    for (g, &r) in grad_x.data_mut().iter_mut().zip(gx_router.data()) {
        *g += r;
    }
    (
        grad_x,
        MoeBlockGrads {
            router: router_grads,
            experts: expert_grads,
            shared: shared_grads,
        },
    )
}

/// Dense SwiGLU FFN used as the first layer and as the dense baseline.
pub type DenseFfnParams<T> = GatedMlpParams<T>;

pub fn dense_ffn_init<T: Scalar>(
    hidden_dim: usize,
    ffn_dim: usize,
    rng: &RngState,
) -> Result<DenseFfnParams<T>, NumericsError> {
    Ok(GatedMlpParams {
        gate: init_normal(&[hidden_dim, ffn_dim], WEIGHT_INIT_STD, &rng.split("gate"))?,
        up: init_normal(&[hidden_dim, ffn_dim], WEIGHT_INIT_STD, &rng.split("up"))?,
        down: init_normal(&[ffn_dim, hidden_dim], WEIGHT_INIT_STD, &rng.split("down"))?,
    })
}

pub fn dense_ffn_forward<T: Scalar>(x: &Tensor<T>, params: &DenseFfnParams<T>) -> GatedMlpForward<T> {
    gated_mlp_forward(x, params)
}

pub fn dense_ffn_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &DenseFfnParams<T>,
    fwd: &GatedMlpForward<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, GatedMlpGrads<T>) {
    gated_mlp_backward(x, params, fwd, dy)
}

/// Exact per-component parameter counts of one MoE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub router_weight: usize,
    pub alpha: usize,
    pub experts: usize,
    pub shared: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.router_weight + self.alpha + self.experts + self.shared
    }
}

pub fn count_params<T: Scalar>(params: &MoeBlockParams<T>) -> ParamCounts {
    ParamCounts {
        router_weight: params.router.weight.len(),
        alpha: params.router.alpha.len(),
        experts: params.experts.up.len()
            + params.experts.down.len()
            + params.experts.gate.as_ref().map_or(0, |g| g.len())
            + params.experts.rms_weight.len(),
        shared: params.shared.param_count(),
    }
}

/// Same counts computed from a config, without building the block.
pub fn count_moe_config(hidden_dim: usize, config: &MoeConfig) -> ParamCounts {
    let n_e = config.num_experts;
    let d_e = config.expert_dim;
    let gate = match config.gating {
        GatingKind::Gated => n_e * d_e * hidden_dim,
        GatingKind::NonGated => 0,
    };
    ParamCounts {
        router_weight: hidden_dim * n_e,
        alpha: n_e,
        experts: 2 * n_e * d_e * hidden_dim + gate + d_e,
        shared: 3 * hidden_dim * config.shared_dim,
    }
}

pub fn dense_ffn_param_count(hidden_dim: usize, ffn_dim: usize) -> usize {
    3 * hidden_dim * ffn_dim
}

/// Solves for the dense FFN width whose parameter count is closest to one MoE
/// block's, rounded to the closest multiple of 8 (at least 8). Used to build
/// parameter-matched dense baselines.
pub fn matched_dense_ffn_dim(hidden_dim: usize, config: &MoeConfig) -> usize {
    let moe_total = count_moe_config(hidden_dim, config).total() as f64;
    let exact = moe_total / (3.0 * hidden_dim as f64);
    let rounded = ((exact / 8.0).round() as usize) * 8;
    rounded.max(8)
}

/// Per-expert mean L2 norm of the weighted expert contributions over a batch
/// (telemetry for expert output-scale heterogeneity).
pub fn expert_output_norms<T: Scalar>(
    x: &Tensor<T>,
    params: &MoeBlockParams<T>,
) -> Vec<f64> {
    let fwd = moe_forward(x, params);
    let n_e = params.experts.num_experts();
    let d_e = params.experts.expert_dim();
    let d_h = params.hidden_dim();
    let mut sums = vec![0.0f64; n_e];
    let mut counts = vec![0usize; n_e];
    let h_ref = fwd.expert.hidden.as_ref().unwrap_or(&fwd.expert.trace.silu_out);
    let mut contrib = vec![T::zero(); d_h];
    for t in 0..x.rows() {
        for s in h_ref.token_slots(t) {
            let e = h_ref.expert_ids[s];
            let score = fwd.decision.scores.data()[t * n_e + e];
            contrib.iter_mut().for_each(|v| *v = T::zero());
            crate::tensor::matmul_accum(
                h_ref.slot(s),
                &params.experts.down.data()[e * d_e * d_h..(e + 1) * d_e * d_h],
                1,
                d_e,
                d_h,
                &mut contrib,
            );
            let norm: f64 = contrib
                .iter()
                .map(|&c| {
                    let v = (score * c).as_f64();
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            sums[e] += norm;
            counts[e] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, DEFAULT_H};
    use crate::routing::route_relu;

    fn block(seed: u64, d_h: usize, config: &MoeConfig) -> MoeBlockParams<f64> {
        MoeBlockParams::init(d_h, config, &RngState::new(seed)).unwrap()
    }

    fn small_config() -> MoeConfig {
        MoeConfig {
            num_experts: 4,
            expert_dim: 3,
            shared_dim: 5,
            ..MoeConfig::default()
        }
    }

    #[test]
    fn no_active_experts_equals_shared_alone() {
        let cfg = small_config();
        let mut params = block(1, 6, &cfg);
        // Force all logits negative by making columns strongly negative on a
        // positive input.
        params.router.weight.fill(-1.0);
        let x = Tensor::<f64>::full(&[3, 6], 0.5);
        let fwd = moe_forward(&x, &params);
        assert_eq!(fwd.decision.activation_ratio, 0.0);
        let shared_only = gated_mlp_forward(&x, &params.shared);
        assert_eq!(fwd.y.data(), shared_only.y.data());
    }

    #[test]
    fn zero_alpha_annihilates_routed_contribution() {
        let cfg = small_config();
        let mut params = block(2, 6, &cfg);
        params.router.alpha.fill(0.0);
        let x = crate::rng::init_normal::<f64>(&[4, 6], 1.0, &RngState::new(3)).unwrap();
        let fwd = moe_forward(&x, &params);
        let shared_only = gated_mlp_forward(&x, &params.shared);
        for (a, b) in fwd.y.data().iter().zip(shared_only.y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // Experts can still be active even though their scores are zero.
        assert!(fwd.decision.activation_ratio > 0.0);
    }

    #[test]
    fn forward_matches_dense_masked_oracle() {
        let cfg = small_config();
        let params = block(4, 6, &cfg);
        let x = crate::rng::init_normal::<f64>(&[5, 6], 1.0, &RngState::new(5)).unwrap();
        let fwd = moe_forward(&x, &params);

        // Oracle: run every expert densely, zero out inactive pairs, weight by
        // scores, add shared.
        let decision = route_relu(&x, &params.router);
        let full = crate::routing::RouterDecision {
            scores: decision.scores.clone(),
            active: vec![true; 5 * 4],
            activation_ratio: 1.0,
        };
        let dense = crate::experts::expert_forward(&x, &full, &params.experts);
        // scores are zero for inactive pairs, so the dense-masked sum equals
        // the weighted dense sum directly.
        let shared = gated_mlp_forward(&x, &params.shared);
        for i in 0..fwd.y.len() {
            let want = dense.y.data()[i] + shared.y.data()[i];
            let got = fwd.y.data()[i];
            assert!(
                (want - got).abs() < 1e-12,
                "dense-masked oracle mismatch at {i}: {want} vs {got}"
            );
        }
    }

    #[test]
    fn full_activation_hook_equals_dense_sum_of_experts() {
        let cfg = MoeConfig {
            activation: ActivationKind::Silu,
            ..small_config()
        };
        let params = block(6, 6, &cfg);
        let x = crate::rng::init_normal::<f64>(&[3, 6], 1.0, &RngState::new(7)).unwrap();
        let forced = crate::routing::RouterDecision {
            scores: Tensor::full(&[3, 4], 1.0),
            active: vec![true; 12],
            activation_ratio: 1.0,
        };
        let fwd = moe_forward_with_decision(&x, &params, forced, None, None);
        // Oracle: straight sum over all experts (weight 1) plus shared.
        let shared = gated_mlp_forward(&x, &params.shared);
        let mut want = shared.y.clone();
        for e in 0..4 {
            let mut one = vec![false; 12];
            for t in 0..3 {
                one[t * 4 + e] = true;
            }
            let d = crate::routing::RouterDecision {
                scores: Tensor::full(&[3, 4], 1.0),
                active: one,
                activation_ratio: 0.25,
            };
            let f = crate::experts::expert_forward(&x, &d, &params.experts);
            for (w, &v) in want.data_mut().iter_mut().zip(f.y.data()) {
                *w += v;
            }
        }
        for (a, b) in fwd.y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_linear_in_alpha() {
        let cfg = small_config();
        let params = block(8, 6, &cfg);
        let x = crate::rng::init_normal::<f64>(&[4, 6], 1.0, &RngState::new(9)).unwrap();
        let y1 = moe_forward(&x, &params).y;
        let mut doubled = params.clone();
        doubled.router.alpha.scale(2.0);
        let y2 = moe_forward(&x, &doubled).y;
        let shared = gated_mlp_forward(&x, &params.shared).y;
        // y2 - y1 = routed part = y1 - shared.
        for i in 0..y1.len() {
            let routed = y1.data()[i] - shared.data()[i];
            assert!(((y2.data()[i] - y1.data()[i]) - routed).abs() < 1e-10);
        }
    }

    #[test]
    fn moe_backward_matches_finite_differences() {
        let cfg = small_config();
        let params = block(10, 5, &cfg);
        // Keep logits away from the ReLU kink.
        let x = loop {
            let c = crate::rng::init_normal::<f64>(&[3, 5], 1.0, &RngState::new(11)).unwrap();
            let (_, tr) = route_relu_traced(&c, &params.router);
            if tr.logits.data().iter().all(|l| l.abs() > 1e-3) {
                break c;
            }
        };
        let g = crate::rng::init_normal::<f64>(&[3, 5], 1.0, &RngState::new(12)).unwrap();
        let fwd = moe_forward(&x, &params);
        let (grad_x, grads) = moe_backward(&x, &params, &fwd, &g, None);

        let mut named = vec![
            ("router.weight".to_string(), params.router.weight.clone()),
            ("router.alpha".to_string(), params.router.alpha.clone()),
            ("experts.up".to_string(), params.experts.up.clone()),
            ("experts.down".to_string(), params.experts.down.clone()),
            ("experts.rms_weight".to_string(), params.experts.rms_weight.clone()),
            ("shared.gate".to_string(), params.shared.gate.clone()),
            ("shared.up".to_string(), params.shared.up.clone()),
            ("shared.down".to_string(), params.shared.down.clone()),
            ("x".to_string(), x.clone()),
        ];
        let analytic = vec![
            ("router.weight".to_string(), grads.router.weight),
            ("router.alpha".to_string(), grads.router.alpha),
            ("experts.up".to_string(), grads.experts.up),
            ("experts.down".to_string(), grads.experts.down),
            ("experts.rms_weight".to_string(), grads.experts.rms_weight),
            ("shared.gate".to_string(), grads.shared.gate),
            ("shared.up".to_string(), grads.shared.up),
            ("shared.down".to_string(), grads.shared.down),
            ("x".to_string(), grad_x),
        ];
        let base = params.clone();
        let report = finite_diff_grad(
            |p| {
                let mut trial = base.clone();
                trial.router.weight = p[0].1.clone();
                trial.router.alpha = p[1].1.clone();
                trial.experts.up = p[2].1.clone();
                trial.experts.down = p[3].1.clone();
                trial.experts.rms_weight = p[4].1.clone();
                trial.shared.gate = p[5].1.clone();
                trial.shared.up = p[6].1.clone();
                trial.shared.down = p[7].1.clone();
                let f = moe_forward(&p[8].1, &trial);
                f.y.data().iter().zip(g.data()).map(|(y, gv)| y * gv).sum()
            },
            &mut named,
            &analytic,
            DEFAULT_H,
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn moe_backward_zero_upstream_and_inactive_alpha() {
        let cfg = small_config();
        let params = block(13, 5, &cfg);
        let x = crate::rng::init_normal::<f64>(&[4, 5], 1.0, &RngState::new(14)).unwrap();
        let fwd = moe_forward(&x, &params);
        let zeros = Tensor::zeros(&[4, 5]);
        let (gx, grads) = moe_backward(&x, &params, &fwd, &zeros, None);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.router.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.experts.up.data().iter().all(|&v| v == 0.0));

        // alpha gradient is zero for experts never active in the batch.
        let g = crate::rng::init_normal::<f64>(&[4, 5], 1.0, &RngState::new(15)).unwrap();
        let (_, grads) = moe_backward(&x, &params, &fwd, &g, None);
        let n_e = 4;
        for e in 0..n_e {
            let ever_active = (0..4).any(|t| fwd.decision.is_active(t, e));
            if !ever_active {
                assert_eq!(grads.router.alpha.data()[e], 0.0);
            }
        }
    }

    #[test]
    fn dense_ffn_gradcheck_and_counts() {
        let rng = RngState::new(16);
        let params = dense_ffn_init::<f64>(5, 7, &rng).unwrap();
        assert_eq!(
            params.param_count(),
            dense_ffn_param_count(5, 7),
            "dense FFN params must be 3 * d_h * d_ff"
        );

        let x = crate::rng::init_normal::<f64>(&[3, 5], 1.0, &rng.split("x")).unwrap();
        let zero = Tensor::<f64>::zeros(&[3, 5]);
        let f0 = dense_ffn_forward(&zero, &params);
        assert!(f0.y.data().iter().all(|&v| v == 0.0), "zero input gives zero output");

        let g = crate::rng::init_normal::<f64>(&[3, 5], 1.0, &rng.split("g")).unwrap();
        let fwd = dense_ffn_forward(&x, &params);
        let (_, grads) = dense_ffn_backward(&x, &params, &fwd, &g);
        let mut named = vec![
            ("gate".to_string(), params.gate.clone()),
            ("up".to_string(), params.up.clone()),
            ("down".to_string(), params.down.clone()),
        ];
        let analytic = vec![
            ("gate".to_string(), grads.gate),
            ("up".to_string(), grads.up),
            ("down".to_string(), grads.down),
        ];
        let report = finite_diff_grad(
            |p| {
                let trial = GatedMlpParams {
                    gate: p[0].1.clone(),
                    up: p[1].1.clone(),
                    down: p[2].1.clone(),
                };
                let f = dense_ffn_forward(&x, &trial);
                f.y.data().iter().zip(g.data()).map(|(y, gv)| y * gv).sum()
            },
            &mut named,
            &analytic,
            DEFAULT_H,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn param_counts_match_structure() {
        let cfg = small_config();
        let params = block(17, 6, &cfg);
        let counts = count_params(&params);
        assert_eq!(counts.router_weight, 6 * 4);
        assert_eq!(counts.alpha, 4);
        assert_eq!(counts.experts, 2 * 4 * 3 * 6 + 3);
        assert_eq!(counts.shared, 3 * 6 * 5);
        assert_eq!(counts, count_moe_config(6, &cfg));
    }

    #[test]
    fn matched_budget_ffn_close_to_moe_block() {
        let cfg = MoeConfig::default();
        let d_h = 64;
        let d_ff = matched_dense_ffn_dim(d_h, &cfg);
        assert_eq!(d_ff % 8, 0);
        let moe_total = count_moe_config(d_h, &cfg).total() as f64;
        let dense_total = dense_ffn_param_count(d_h, d_ff) as f64;
        let rel = (moe_total - dense_total).abs() / moe_total;
        // Per-layer counts within the multiple-of-8 rounding granularity.
        assert!(rel < 8.0 * 3.0 * d_h as f64 / moe_total, "rel diff {rel}");
    }

    #[test]
    fn expert_output_norm_telemetry_runs() {
        let cfg = small_config();
        let params = block(18, 6, &cfg);
        let x = crate::rng::init_normal::<f64>(&[32, 6], 1.0, &RngState::new(19)).unwrap();
        let norms = expert_output_norms(&x, &params);
        assert_eq!(norms.len(), 4);
        assert!(norms.iter().any(|&n| n > 0.0));
    }
}
