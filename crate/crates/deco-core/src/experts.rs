//! Expert computation: the gathered (sparse) linear operator, the NormSiLU
//! activation with its ablation variants, non-gated and gated expert MLPs,
//! and the always-on shared expert.
//!
//! NormSiLU applies two normalization stages before SiLU:
//! 1. inter-expert mean normalization — subtract the response of the
//!    cross-expert average up-projection, equivalent to centering each
//!    expert's up-projection weights around the mean;
//! 2. intra-expert RMS normalization over the expert dimension, with one
//!    learnable weight vector shared by all experts of a layer.
//!
//! Expert weights are stored expert-contiguously as `[N_e, in, out]` blocks so
//! skipping an inactive expert skips one contiguous byte range, and each
//! gathered row is produced by the same `matmul_accum` kernel as the dense
//! path — sparse execution is an optimization, never an approximation.

use serde::{Deserialize, Serialize};

use crate::routing::RouterDecision;
use crate::tensor::{
    matmul_accum, matmul_accum_at, matmul_accum_bt, rms_norm_row, rms_norm_row_backward,
    silu_deriv, silu_scalar, NumericsError, Scalar, Tensor,
};

/// RMS epsilon inside NormSiLU and the transformer norms.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// Mean subtraction, then RMS normalization, then SiLU.
    Normsilu,
    /// RMS normalization then SiLU (no mean subtraction).
    NormsiluNoMean,
    /// Mean subtraction then SiLU (no RMS normalization).
    NormsiluNoRms,
    /// Plain SiLU.
    Silu,
}

impl ActivationKind {
    pub fn centers_mean(self) -> bool {
        matches!(self, ActivationKind::Normsilu | ActivationKind::NormsiluNoRms)
    }

    pub fn applies_rms(self) -> bool {
        matches!(self, ActivationKind::Normsilu | ActivationKind::NormsiluNoMean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingKind {
    NonGated,
    Gated,
}

/// Routed expert weights.
///
/// `up` is `[N_e, d_h, d_e]`, `down` is `[N_e, d_e, d_h]`, `gate` (gated
/// ablation only) matches `up`. Each expert block is `[in, out]` row-major.
#[derive(Debug, Clone)]
pub struct ExpertParams<T> {
    pub up: Tensor<T>,
    pub down: Tensor<T>,
    pub gate: Option<Tensor<T>>,
    /// Learnable RMS weight `[d_e]`, one per MoE layer, shared across experts.
    pub rms_weight: Tensor<T>,
    pub activation: ActivationKind,
    pub gating: GatingKind,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn num_experts(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn expert_dim(&self) -> usize {
        self.up.shape()[2]
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let (n_e, d_h, d_e) = (self.num_experts(), self.hidden_dim(), self.expert_dim());
        if self.down.shape() != [n_e, d_e, d_h] {
            return Err(NumericsError::Invalid(format!(
                "down shape {:?} inconsistent with up {:?}",
                self.down.shape(),
                self.up.shape()
            )));
        }
        if self.rms_weight.len() != d_e {
            return Err(NumericsError::Invalid(format!(
                "rms weight length {} != expert dim {d_e}",
                self.rms_weight.len()
            )));
        }
        match (self.gating, &self.gate) {
            (GatingKind::Gated, Some(g)) if g.shape() == self.up.shape() => Ok(()),
            (GatingKind::NonGated, None) => Ok(()),
            _ => Err(NumericsError::Invalid(
                "gate weights must be present exactly for the gated kind".into(),
            )),
        }
    }

    /// Per-expert weight block of a `[N_e, a, b]` tensor.
    fn block(t: &Tensor<T>, e: usize) -> &[T] {
        let sz = t.shape()[1] * t.shape()[2];
        &t.data()[e * sz..(e + 1) * sz]
    }
}

/// Gathered values for the active (token, expert) pairs of a batch, grouped by
/// token with ascending expert ids: row layout `[pairs, width]`.
#[derive(Debug, Clone)]
pub struct Gathered<T> {
    /// CSR-style offsets, length `N_t + 1`.
    pub token_offsets: Vec<usize>,
    /// Expert id per slot, length = total pairs.
    pub expert_ids: Vec<usize>,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Gathered<T> {
    pub fn pairs(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_offsets.len() - 1
    }

    pub fn slot(&self, s: usize) -> &[T] {
        &self.data[s * self.width..(s + 1) * self.width]
    }

    pub fn slot_mut(&mut self, s: usize) -> &mut [T] {
        &mut self.data[s * self.width..(s + 1) * self.width]
    }

    pub fn token_slots(&self, t: usize) -> std::ops::Range<usize> {
        self.token_offsets[t]..self.token_offsets[t + 1]
    }

    pub fn zeros_like(&self) -> Self {
        Gathered {
            token_offsets: self.token_offsets.clone(),
            expert_ids: self.expert_ids.clone(),
            width: self.width,
            data: vec![T::zero(); self.data.len()],
        }
    }
}

/// Computes `weights[e] . x_t` for every active (token, expert) pair; inactive
/// pairs are never touched. `weights` is `[N_e, in, out]`; `x` is `[N_t, in]`.
///
/// With a full mask this equals the dense per-expert computation element for
/// element, because both run the same kernel in the same order.
pub fn sparse_linear<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, active: &[bool]) -> Gathered<T> {
    let n_t = x.rows();
    let n_e = weights.shape()[0];
    let (d_in, d_out) = (weights.shape()[1], weights.shape()[2]);
    debug_assert_eq!(x.cols(), d_in);
    debug_assert_eq!(active.len(), n_t * n_e);

    let pairs = active.iter().filter(|&&a| a).count();
    let mut token_offsets = Vec::with_capacity(n_t + 1);
    let mut expert_ids = Vec::with_capacity(pairs);
    let mut data = vec![T::zero(); pairs * d_out];

    token_offsets.push(0);
    let mut slot = 0;
    for t in 0..n_t {
        let x_row = x.row(t);
        for e in 0..n_e {
            if active[t * n_e + e] {
                let w = ExpertParams::block(weights, e);
                matmul_accum(x_row, w, 1, d_in, d_out, &mut data[slot * d_out..(slot + 1) * d_out]);
                expert_ids.push(e);
                slot += 1;
            }
        }
        token_offsets.push(slot);
    }
    Gathered {
        token_offsets,
        expert_ids,
        width: d_out,
        data,
    }
}

/// Cross-expert mean of the up-projection weights, `[d_h, d_e]`. Recomputed
/// from the current weights every training step; cached as a constant at
/// inference.
pub fn mean_up_weights<T: Scalar>(up: &Tensor<T>) -> Tensor<T> {
    let (n_e, d_h, d_e) = (up.shape()[0], up.shape()[1], up.shape()[2]);
    let mut mean = Tensor::zeros(&[d_h, d_e]);
    for e in 0..n_e {
        let block = ExpertParams::<T>::block(up, e);
        for (m, &w) in mean.data_mut().iter_mut().zip(block.iter()) {
            *m += w;
        }
    }
    let inv = T::one() / T::from_f64(n_e as f64);
    mean.scale(inv);
    mean
}

/// Per-forward diagnostics of the expert activation path. All gathered fields
/// share the `[pairs, d_e]` layout of the intermediate they describe.
#[derive(Debug, Clone)]
pub struct ExpertTrace<T> {
    /// Pre-normalization intermediate (the raw up-projection output).
    pub z: Gathered<T>,
    /// After inter-expert mean subtraction (equals `z` for variants without it).
    pub z_centered: Gathered<T>,
    /// Input to SiLU after all normalization steps.
    pub u: Gathered<T>,
    /// SiLU output.
    pub silu_out: Gathered<T>,
    /// Inverse RMS per slot (1.0 where RMS normalization is skipped).
    pub inv_rms: Vec<T>,
    /// Mean of `|silu_out|` over active entries.
    pub mean_abs_silu: f64,
}

/// Applies the activation variant to a gathered intermediate.
///
/// `wbar_up` must be the cross-expert mean of the same up-projection weights
/// that produced `z` (see [`mean_up_weights`]).
pub fn norm_silu<T: Scalar>(
    x: &Tensor<T>,
    wbar_up: &Tensor<T>,
    z: Gathered<T>,
    rms_weight: &Tensor<T>,
    variant: ActivationKind,
) -> ExpertTrace<T> {
    let d_e = z.width;
    let n_t = z.num_tokens();
    let d_h = x.cols();

    let mut z_centered = z.clone();
    if variant.centers_mean() {
        let mut mean_row = vec![T::zero(); d_e];
        for t in 0..n_t {
            let slots = z.token_slots(t);
            if slots.is_empty() {
                continue;
            }
            mean_row.iter_mut().for_each(|v| *v = T::zero());
            matmul_accum(x.row(t), wbar_up.data(), 1, d_h, d_e, &mut mean_row);
            for s in slots {
                for (zc, &m) in z_centered.slot_mut(s).iter_mut().zip(mean_row.iter()) {
                    *zc -= m;
                }
            }
        }
    }

    let mut u = z_centered.clone();
    let mut inv_rms = vec![T::one(); z.pairs()];
    if variant.applies_rms() {
        let eps = T::from_f64(RMS_EPS);
        for s in 0..u.pairs() {
            inv_rms[s] = rms_norm_row(u.slot_mut(s), rms_weight.data(), eps);
        }
    }

    let mut silu_out = u.clone();
    let mut abs_sum = 0.0;
    for v in silu_out.data.iter_mut() {
        *v = silu_scalar(*v);
        abs_sum += v.as_f64().abs();
    }
    let mean_abs_silu = if silu_out.data.is_empty() {
        0.0
    } else {
        abs_sum / silu_out.data.len() as f64
    };

    ExpertTrace {
        z,
        z_centered,
        u,
        silu_out,
        inv_rms,
        mean_abs_silu,
    }
}

/// Forward state of one routed-expert evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExpertForward<T> {
    pub y: Tensor<T>,
    pub trace: ExpertTrace<T>,
    /// Gate-branch pre-activations (gated kind only).
    pub gate_pre: Option<Gathered<T>>,
    /// Intermediate entering the down projection when it differs from
    /// `trace.silu_out` (gated kind only).
    pub hidden: Option<Gathered<T>>,
}

pub fn expert_forward<T: Scalar>(
    x: &Tensor<T>,
    decision: &RouterDecision<T>,
    params: &ExpertParams<T>,
) -> ExpertForward<T> {
    let wbar = mean_up_weights(&params.up);
    expert_forward_with_wbar(x, decision, params, &wbar)
}

pub fn expert_forward_with_wbar<T: Scalar>(
    x: &Tensor<T>,
    decision: &RouterDecision<T>,
    params: &ExpertParams<T>,
    wbar: &Tensor<T>,
) -> ExpertForward<T> {
    let n_t = x.rows();
    let (d_h, d_e) = (params.hidden_dim(), params.expert_dim());
    let n_e = params.num_experts();

    let z = sparse_linear(x, &params.up, &decision.active);
    let trace = norm_silu(x, wbar, z, &params.rms_weight, params.activation);

    let (gate_pre, hidden) = match params.gating {
        GatingKind::NonGated => (None, None),
        GatingKind::Gated => {
            let q = sparse_linear(x, params.gate.as_ref().expect("gated"), &decision.active);
            let mut h = trace.silu_out.clone();
            for (hv, &qv) in h.data.iter_mut().zip(q.data.iter()) {
                *hv *= silu_scalar(qv);
            }
            (Some(q), Some(h))
        }
    };

    let h_ref = hidden.as_ref().unwrap_or(&trace.silu_out);
    let mut y = Tensor::zeros(&[n_t, d_h]);
    let mut contrib = vec![T::zero(); d_h];
    for t in 0..n_t {
        for s in h_ref.token_slots(t) {
            let e = h_ref.expert_ids[s];
            let score = decision.scores.data()[t * n_e + e];
            contrib.iter_mut().for_each(|v| *v = T::zero());
            matmul_accum(
                h_ref.slot(s),
                ExpertParams::block(&params.down, e),
                1,
                d_e,
                d_h,
                &mut contrib,
            );
            let y_row = y.row_mut(t);
            for (yv, &c) in y_row.iter_mut().zip(contrib.iter()) {
                *yv += score * c;
            }
        }
    }

    ExpertForward {
        y,
        trace,
        gate_pre,
        hidden,
    }
}

#[derive(Debug, Clone)]
pub struct ExpertGrads<T> {
    pub up: Tensor<T>,
    pub down: Tensor<T>,
    pub gate: Option<Tensor<T>>,
    pub rms_weight: Tensor<T>,
}

/// Backward pass of [`expert_forward`]. Returns `(grad_x, grads, grad_scores)`.
///
/// The inter-expert mean term couples the experts: its gradient flows back
/// into every expert's up-projection through the averaged weights, including
/// experts that were never active in the batch. Down-projection (and gate)
/// weights of never-active experts receive exactly zero gradient.
pub fn expert_backward<T: Scalar>(
    x: &Tensor<T>,
    decision: &RouterDecision<T>,
    params: &ExpertParams<T>,
    fwd: &ExpertForward<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, ExpertGrads<T>, Tensor<T>) {
    let n_t = x.rows();
    let (d_h, d_e) = (params.hidden_dim(), params.expert_dim());
    let n_e = params.num_experts();
    let block_up = d_h * d_e;
    let block_down = d_e * d_h;

    let mut grad_x = Tensor::zeros(&[n_t, d_h]);
    let mut grad_up = Tensor::zeros(&[n_e, d_h, d_e]);
    let mut grad_down = Tensor::zeros(&[n_e, d_e, d_h]);
    let mut grad_gate = params.gate.as_ref().map(|_| Tensor::zeros(&[n_e, d_h, d_e]));
    let mut grad_rms = Tensor::zeros(&[d_e]);
    let mut grad_scores = Tensor::zeros(&[n_t, n_e]);

    let h_ref = fwd.hidden.as_ref().unwrap_or(&fwd.trace.silu_out);
    let needs_mean = params.activation.centers_mean();
    let wbar = if needs_mean {
        Some(mean_up_weights(&params.up))
    } else {
        None
    };
    let mut grad_wbar = wbar.as_ref().map(|_| Tensor::<T>::zeros(&[d_h, d_e]));

    let mut contrib = vec![T::zero(); d_h];
    let mut dh = vec![T::zero(); d_e];
    let mut scaled_dy = vec![T::zero(); d_h];
    let mut dz0 = vec![T::zero(); d_e];
    let mut dm = vec![T::zero(); d_e];

    for t in 0..n_t {
        let dy_row = dy.row(t);
        dm.iter_mut().for_each(|v| *v = T::zero());
        for s in h_ref.token_slots(t) {
            let e = h_ref.expert_ids[s];
            let score = decision.scores.data()[t * n_e + e];
            let down_block = ExpertParams::block(&params.down, e);

            // Score gradient: dy . (h_s x down_e), unscaled.
            contrib.iter_mut().for_each(|v| *v = T::zero());
            matmul_accum(h_ref.slot(s), down_block, 1, d_e, d_h, &mut contrib);
            let mut ds = T::zero();
            for (dv, &c) in dy_row.iter().zip(contrib.iter()) {
                ds += *dv * c;
            }
            grad_scores.data_mut()[t * n_e + e] = ds;

            // Down-projection and hidden gradients.
            for (sv, &dv) in scaled_dy.iter_mut().zip(dy_row.iter()) {
                *sv = score * dv;
            }
            matmul_accum_at(
                h_ref.slot(s),
                &scaled_dy,
                1,
                d_e,
                d_h,
                &mut grad_down.data_mut()[e * block_down..(e + 1) * block_down],
            );
            dh.iter_mut().for_each(|v| *v = T::zero());
            matmul_accum_bt(&scaled_dy, down_block, 1, d_e, d_h, &mut dh);

            // Gate branch (gated ablation).
            if let (Some(q), Some(gate_w)) = (&fwd.gate_pre, &params.gate) {
                let q_row = q.slot(s);
                let act_row = fwd.trace.silu_out.slot(s);
                let mut dq = vec![T::zero(); d_e];
                for j in 0..d_e {
                    let g_act = silu_scalar(q_row[j]);
                    let d_hidden = dh[j];
                    dq[j] = d_hidden * act_row[j] * silu_deriv(q_row[j]);
                    dh[j] = d_hidden * g_act;
                }
                let gg = grad_gate.as_mut().expect("gated grads");
                matmul_accum_at(
                    x.row(t),
                    &dq,
                    1,
                    d_h,
                    d_e,
                    &mut gg.data_mut()[e * block_up..(e + 1) * block_up],
                );
                matmul_accum_bt(
                    &dq,
                    ExpertParams::block(gate_w, e),
                    1,
                    d_h,
                    d_e,
                    grad_x.row_mut(t),
                );
            }

            // Activation backward: dh is now the gradient at the SiLU output.
            let u_row = fwd.trace.u.slot(s);
            for j in 0..d_e {
                dh[j] *= silu_deriv(u_row[j]);
            }
            // dh is now du (gradient at the SiLU input).
            dz0.iter_mut().for_each(|v| *v = T::zero());
            if params.activation.applies_rms() {
                rms_norm_row_backward(
                    fwd.trace.z_centered.slot(s),
                    params.rms_weight.data(),
                    fwd.trace.inv_rms[s],
                    &dh,
                    &mut dz0,
                    grad_rms.data_mut(),
                );
            } else {
                dz0.copy_from_slice(&dh);
            }

            if needs_mean {
                for (m, &d) in dm.iter_mut().zip(dz0.iter()) {
                    *m -= d;
                }
            }

            // z = up_e . x_t
            matmul_accum_at(
                x.row(t),
                &dz0,
                1,
                d_h,
                d_e,
                &mut grad_up.data_mut()[e * block_up..(e + 1) * block_up],
            );
            matmul_accum_bt(
                &dz0,
                ExpertParams::block(&params.up, e),
                1,
                d_h,
                d_e,
                grad_x.row_mut(t),
            );
        }

        if let (Some(gw), Some(wb)) = (&mut grad_wbar, &wbar) {
            // m_t = wbar . x_t, shared by every active slot of the token.
            matmul_accum_at(x.row(t), &dm, 1, d_h, d_e, gw.data_mut());
            matmul_accum_bt(&dm, wb.data(), 1, d_h, d_e, grad_x.row_mut(t));
        }
    }

    // wbar = mean of up blocks: spread its gradient over every expert.
    if let Some(gw) = &grad_wbar {
        let inv = T::one() / T::from_f64(n_e as f64);
        for e in 0..n_e {
            let dst = &mut grad_up.data_mut()[e * block_up..(e + 1) * block_up];
            for (d, &g) in dst.iter_mut().zip(gw.data().iter()) {
                *d += g * inv;
            }
        }
    }

    (
        grad_x,
        ExpertGrads {
            up: grad_up,
            down: grad_down,
            gate: grad_gate,
            rms_weight: grad_rms,
        },
        grad_scores,
    )
}

/// Gated-SiLU MLP: `y = (SiLU(x.gate) * (x.up)) . down`. Used for the shared
/// expert and the dense FFN baseline.
#[derive(Debug, Clone)]
pub struct GatedMlpParams<T> {
    /// `[d_in, d_mid]`
    pub gate: Tensor<T>,
    /// `[d_in, d_mid]`
    pub up: Tensor<T>,
    /// `[d_mid, d_in]`
    pub down: Tensor<T>,
}

pub type SharedExpertParams<T> = GatedMlpParams<T>;

impl<T: Scalar> GatedMlpParams<T> {
    pub fn dims(&self) -> (usize, usize) {
        (self.gate.shape()[0], self.gate.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.gate.len() + self.up.len() + self.down.len()
    }
}

#[derive(Debug, Clone)]
pub struct GatedMlpForward<T> {
    pub y: Tensor<T>,
    gate_pre: Tensor<T>,
    up_lin: Tensor<T>,
}

pub fn gated_mlp_forward<T: Scalar>(x: &Tensor<T>, params: &GatedMlpParams<T>) -> GatedMlpForward<T> {
    let n_t = x.rows();
    let (d_in, d_mid) = params.dims();
    let mut gate_pre = Tensor::zeros(&[n_t, d_mid]);
    matmul_accum(x.data(), params.gate.data(), n_t, d_in, d_mid, gate_pre.data_mut());
    let mut up_lin = Tensor::zeros(&[n_t, d_mid]);
    matmul_accum(x.data(), params.up.data(), n_t, d_in, d_mid, up_lin.data_mut());

    let mut hidden = Tensor::zeros(&[n_t, d_mid]);
    for i in 0..hidden.len() {
        hidden.data_mut()[i] = silu_scalar(gate_pre.data()[i]) * up_lin.data()[i];
    }
    let mut y = Tensor::zeros(&[n_t, d_in]);
    matmul_accum(hidden.data(), params.down.data(), n_t, d_mid, d_in, y.data_mut());
    GatedMlpForward { y, gate_pre, up_lin }
}

#[derive(Debug, Clone)]
pub struct GatedMlpGrads<T> {
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

pub fn gated_mlp_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &GatedMlpParams<T>,
    fwd: &GatedMlpForward<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, GatedMlpGrads<T>) {
    let n_t = x.rows();
    let (d_in, d_mid) = params.dims();

    // Rebuild hidden = silu(a) * b for the down-projection gradient.
    let mut hidden = Tensor::zeros(&[n_t, d_mid]);
    for i in 0..hidden.len() {
        hidden.data_mut()[i] = silu_scalar(fwd.gate_pre.data()[i]) * fwd.up_lin.data()[i];
    }
    let mut grad_down = Tensor::zeros(&[d_mid, d_in]);
    matmul_accum_at(hidden.data(), dy.data(), n_t, d_mid, d_in, grad_down.data_mut());
    let mut dhidden = Tensor::zeros(&[n_t, d_mid]);
    matmul_accum_bt(dy.data(), params.down.data(), n_t, d_mid, d_in, dhidden.data_mut());

    let mut da = Tensor::zeros(&[n_t, d_mid]);
    let mut db = Tensor::zeros(&[n_t, d_mid]);
    for i in 0..dhidden.len() {
        let a = fwd.gate_pre.data()[i];
        let b = fwd.up_lin.data()[i];
        let dh = dhidden.data()[i];
        da.data_mut()[i] = dh * b * silu_deriv(a);
        db.data_mut()[i] = dh * silu_scalar(a);
    }

    let mut grad_gate = Tensor::zeros(&[d_in, d_mid]);
    matmul_accum_at(x.data(), da.data(), n_t, d_in, d_mid, grad_gate.data_mut());
    let mut grad_up = Tensor::zeros(&[d_in, d_mid]);
    matmul_accum_at(x.data(), db.data(), n_t, d_in, d_mid, grad_up.data_mut());

    let mut grad_x = Tensor::zeros(&[n_t, d_in]);
    matmul_accum_bt(da.data(), params.gate.data(), n_t, d_in, d_mid, grad_x.data_mut());
    matmul_accum_bt(db.data(), params.up.data(), n_t, d_in, d_mid, grad_x.data_mut());

    (
        grad_x,
        GatedMlpGrads {
            gate: grad_gate,
            up: grad_up,
            down: grad_down,
        },
    )
}
