//! Minimal byte-level causal language model hosting MoE blocks: token and
//! learned positional embeddings, pre-norm attention blocks, FFN slots filled
//! per layer (dense SwiGLU or MoE), untied output head.
//!
//! All weight draws come from streams named after the parameter path, so two
//! builds with the same seed share bit-identical non-FFN weights regardless of
//! which FFN variant fills each slot.

use serde::{Deserialize, Serialize};

use crate::attention::{attn_backward, attn_forward, AttnForward, AttnGrads, AttnParams};
use crate::experts::{GatedMlpForward, GatedMlpParams, RMS_EPS};
use crate::moe::{
    dense_ffn_backward, dense_ffn_forward, dense_ffn_init, matched_dense_ffn_dim, moe_backward,
    moe_forward, MoeBlockParams, MoeConfig, MoeForward,
};
use crate::rng::{init_normal, RngState};
use crate::tensor::{
    matmul_accum, matmul_accum_at, matmul_accum_bt, rms_norm_row, rms_norm_row_backward, Scalar,
    Tensor,
};
use crate::DecoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Moe,
}

/// Model architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    /// FFN kind per layer; layer 0 must be dense.
    pub ffn: Vec<FfnKind>,
    pub moe: MoeConfig,
    pub seed: u64,
}

impl LmConfig {
    /// Desk-scale defaults: all-MoE layers behind a dense first layer.
    pub fn desk_default() -> Self {
        let n_layers = 4;
        LmConfig {
            vocab_size: 256,
            hidden_dim: 64,
            n_layers,
            n_heads: 4,
            context: 128,
            ffn: std::iter::once(FfnKind::Dense)
                .chain(std::iter::repeat(FfnKind::Moe).take(n_layers - 1))
                .collect(),
            moe: MoeConfig::default(),
            seed: 0,
        }
    }

    /// A dense baseline with the same non-FFN structure and a parameter-
    /// matched FFN width.
    pub fn dense_counterpart(&self) -> Self {
        LmConfig {
            ffn: vec![FfnKind::Dense; self.n_layers],
            ..self.clone()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        matched_dense_ffn_dim(self.hidden_dim, &self.moe)
    }

    pub fn validate(&self) -> Result<(), DecoError> {
        if self.vocab_size < 2 {
            return Err(DecoError::Config("vocab_size must be >= 2".into()));
        }
        if self.ffn.len() != self.n_layers {
            return Err(DecoError::Config(format!(
                "ffn kinds ({}) must match n_layers ({})",
                self.ffn.len(),
                self.n_layers
            )));
        }
        if self.ffn.first() != Some(&FfnKind::Dense) {
            return Err(DecoError::Config("layer 0 must use a dense FFN".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(DecoError::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.context < 1 {
            return Err(DecoError::Config("context must be >= 1".into()));
        }
        self.moe.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum FfnParams<T> {
    Dense(GatedMlpParams<T>),
    Moe(MoeBlockParams<T>),
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub attn: AttnParams<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Debug, Clone)]
pub struct LmParams<T> {
    pub embed: Tensor<T>,
    pub pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
}

/// Builds a model from its config. Identical seeds give identical non-FFN
/// weights across FFN variants.
pub fn build_model<T: Scalar>(cfg: &LmConfig) -> Result<LmParams<T>, DecoError> {
    cfg.validate()?;
    let rng = RngState::new(cfg.seed);
    let d_h = cfg.hidden_dim;
    let std = crate::moe::WEIGHT_INIT_STD;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, kind) in cfg.ffn.iter().enumerate() {
        let lr = rng.split(&format!("layer{i}"));
        let attn = AttnParams {
            wq: init_normal(&[d_h, d_h], std, &lr.split("attn.wq"))?,
            wk: init_normal(&[d_h, d_h], std, &lr.split("attn.wk"))?,
            wv: init_normal(&[d_h, d_h], std, &lr.split("attn.wv"))?,
            wo: init_normal(&[d_h, d_h], std, &lr.split("attn.wo"))?,
        };
        let ffn = match kind {
            FfnKind::Dense => FfnParams::Dense(dense_ffn_init(d_h, cfg.ffn_dim(), &lr.split("ffn"))?),
            FfnKind::Moe => FfnParams::Moe(MoeBlockParams::init(d_h, &cfg.moe, &lr.split("moe"))?),
        };
        layers.push(LayerParams {
            attn_norm: Tensor::full(&[d_h], T::one()),
            attn,
            ffn_norm: Tensor::full(&[d_h], T::one()),
            ffn,
        });
    }
    Ok(LmParams {
        embed: init_normal(&[cfg.vocab_size, d_h], std, &rng.split("embed"))?,
        pos: init_normal(&[cfg.context, d_h], std, &rng.split("pos"))?,
        layers,
        final_norm: Tensor::full(&[d_h], T::one()),
        // Zero head: a fresh model emits exactly uniform logits.
        head: Tensor::zeros(&[d_h, cfg.vocab_size]),
    })
}

impl<T: Scalar> LmParams<T> {
    pub fn zeros_like(&self) -> LmParams<T> {
        fn z<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
            Tensor::zeros(t.shape())
        }
        LmParams {
            embed: z(&self.embed),
            pos: z(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    attn: AttnParams {
                        wq: z(&l.attn.wq),
                        wk: z(&l.attn.wk),
                        wv: z(&l.attn.wv),
                        wo: z(&l.attn.wo),
                    },
                    ffn_norm: z(&l.ffn_norm),
                    ffn: match &l.ffn {
                        FfnParams::Dense(d) => FfnParams::Dense(GatedMlpParams {
                            gate: z(&d.gate),
                            up: z(&d.up),
                            down: z(&d.down),
                        }),
                        FfnParams::Moe(m) => FfnParams::Moe(MoeBlockParams {
                            router: crate::routing::RouterParams {
                                weight: z(&m.router.weight),
                                alpha: z(&m.router.alpha),
                                kind: m.router.kind.clone(),
                            },
                            experts: crate::experts::ExpertParams {
                                up: z(&m.experts.up),
                                down: z(&m.experts.down),
                                gate: m.experts.gate.as_ref().map(z),
                                rms_weight: z(&m.experts.rms_weight),
                                activation: m.experts.activation,
                                gating: m.experts.gating,
                            },
                            shared: GatedMlpParams {
                                gate: z(&m.shared.gate),
                                up: z(&m.shared.up),
                                down: z(&m.shared.down),
                            },
                            config: m.config.clone(),
                        }),
                    },
                })
                .collect(),
            final_norm: z(&self.final_norm),
            head: z(&self.head),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        fn c<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
            t.cast()
        }
        LmParams {
            embed: c(&self.embed),
            pos: c(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    attn: AttnParams {
                        wq: c(&l.attn.wq),
                        wk: c(&l.attn.wk),
                        wv: c(&l.attn.wv),
                        wo: c(&l.attn.wo),
                    },
                    ffn_norm: c(&l.ffn_norm),
                    ffn: match &l.ffn {
                        FfnParams::Dense(d) => FfnParams::Dense(GatedMlpParams {
                            gate: c(&d.gate),
                            up: c(&d.up),
                            down: c(&d.down),
                        }),
                        FfnParams::Moe(m) => FfnParams::Moe(MoeBlockParams {
                            router: crate::routing::RouterParams {
                                weight: c(&m.router.weight),
                                alpha: c(&m.router.alpha),
                                kind: m.router.kind.clone(),
                            },
                            experts: crate::experts::ExpertParams {
                                up: c(&m.experts.up),
                                down: c(&m.experts.down),
                                gate: m.experts.gate.as_ref().map(c),
                                rms_weight: c(&m.experts.rms_weight),
                                activation: m.experts.activation,
                                gating: m.experts.gating,
                            },
                            shared: GatedMlpParams {
                                gate: c(&m.shared.gate),
                                up: c(&m.shared.up),
                                down: c(&m.shared.down),
                            },
                            config: m.config.clone(),
                        }),
                    },
                })
                .collect(),
            final_norm: c(&self.final_norm),
            head: c(&self.head),
        }
    }

    /// Stable-order named views of every learnable tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("attn_norm"), &l.attn_norm));
            out.push((p("attn.wq"), &l.attn.wq));
            out.push((p("attn.wk"), &l.attn.wk));
            out.push((p("attn.wv"), &l.attn.wv));
            out.push((p("attn.wo"), &l.attn.wo));
            out.push((p("ffn_norm"), &l.ffn_norm));
            match &l.ffn {
                FfnParams::Dense(d) => {
                    out.push((p("ffn.gate"), &d.gate));
                    out.push((p("ffn.up"), &d.up));
                    out.push((p("ffn.down"), &d.down));
                }
                FfnParams::Moe(m) => {
                    out.push((p("moe.router.weight"), &m.router.weight));
                    out.push((p("moe.router.alpha"), &m.router.alpha));
                    out.push((p("moe.experts.up"), &m.experts.up));
                    out.push((p("moe.experts.down"), &m.experts.down));
                    if let Some(g) = &m.experts.gate {
                        out.push((p("moe.experts.gate"), g));
                    }
                    out.push((p("moe.experts.rms_weight"), &m.experts.rms_weight));
                    out.push((p("moe.shared.gate"), &m.shared.gate));
                    out.push((p("moe.shared.up"), &m.shared.up));
                    out.push((p("moe.shared.down"), &m.shared.down));
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable variant of [`Self::named_tensors`]; same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("attn_norm"), &mut l.attn_norm));
            out.push((p("attn.wq"), &mut l.attn.wq));
            out.push((p("attn.wk"), &mut l.attn.wk));
            out.push((p("attn.wv"), &mut l.attn.wv));
            out.push((p("attn.wo"), &mut l.attn.wo));
            out.push((p("ffn_norm"), &mut l.ffn_norm));
            match &mut l.ffn {
                FfnParams::Dense(d) => {
                    out.push((p("ffn.gate"), &mut d.gate));
                    out.push((p("ffn.up"), &mut d.up));
                    out.push((p("ffn.down"), &mut d.down));
                }
                FfnParams::Moe(m) => {
                    out.push((p("moe.router.weight"), &mut m.router.weight));
                    out.push((p("moe.router.alpha"), &mut m.router.alpha));
                    out.push((p("moe.experts.up"), &mut m.experts.up));
                    out.push((p("moe.experts.down"), &mut m.experts.down));
                    if let Some(g) = &mut m.experts.gate {
                        out.push((p("moe.experts.gate"), g));
                    }
                    out.push((p("moe.experts.rms_weight"), &mut m.experts.rms_weight));
                    out.push((p("moe.shared.gate"), &mut m.shared.gate));
                    out.push((p("moe.shared.up"), &mut m.shared.up));
                    out.push((p("moe.shared.down"), &mut m.shared.down));
                }
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug)]
pub enum FfnForward<T> {
    Dense(GatedMlpForward<T>),
    Moe(MoeForward<T>),
}

impl<T: Scalar> FfnForward<T> {
    fn y(&self) -> &Tensor<T> {
        match self {
            FfnForward::Dense(f) => &f.y,
            FfnForward::Moe(f) => &f.y,
        }
    }

    pub fn as_moe(&self) -> Option<&MoeForward<T>> {
        match self {
            FfnForward::Moe(f) => Some(f),
            FfnForward::Dense(_) => None,
        }
    }
}

#[derive(Debug)]
pub struct LayerForward<T> {
    x_in: Tensor<T>,
    attn_norm_inv: Vec<T>,
    attn_normed: Tensor<T>,
    attn: AttnForward<T>,
    mid: Tensor<T>,
    ffn_norm_inv: Vec<T>,
    ffn_normed: Tensor<T>,
    pub ffn: FfnForward<T>,
}

#[derive(Debug)]
pub struct LmForward<T> {
    pub layers: Vec<LayerForward<T>>,
    final_in: Tensor<T>,
    final_norm_inv: Vec<T>,
    final_normed: Tensor<T>,
    pub logits: Tensor<T>,
}

fn rms_rows<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let mut out = x.clone();
    let eps = T::from_f64(RMS_EPS);
    let inv: Vec<T> = (0..x.rows())
        .map(|r| rms_norm_row(out.row_mut(r), weight.data(), eps))
        .collect();
    (out, inv)
}

fn rms_rows_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    inv: &[T],
    dy: &Tensor<T>,
    dx: &mut Tensor<T>,
    dweight: &mut Tensor<T>,
) {
    for r in 0..x.rows() {
        rms_norm_row_backward(
            x.row(r),
            weight.data(),
            inv[r],
            dy.row(r),
            dx.row_mut(r),
            dweight.data_mut(),
        );
    }
}

/// Forward over `n_seqs` sequences of `cfg.context` tokens each, flattened
/// sequence-major into `tokens`.
pub fn lm_forward<T: Scalar>(
    params: &LmParams<T>,
    cfg: &LmConfig,
    tokens: &[usize],
    n_seqs: usize,
) -> LmForward<T> {
    let ctx = cfg.context;
    debug_assert_eq!(tokens.len(), n_seqs * ctx);
    let n = tokens.len();
    let d_h = cfg.hidden_dim;

    let mut x = Tensor::zeros(&[n, d_h]);
    for (r, &tok) in tokens.iter().enumerate() {
        let pos = r % ctx;
        let e_row = params.embed.row(tok);
        let p_row = params.pos.row(pos);
        for (xv, (&e, &p)) in x.row_mut(r).iter_mut().zip(e_row.iter().zip(p_row)) {
            *xv = e + p;
        }
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let (attn_normed, attn_norm_inv) = rms_rows(&x, &l.attn_norm);
        let attn = attn_forward(&attn_normed, &l.attn, cfg.n_heads, ctx);
        let mut mid = x.clone();
        for (m, &a) in mid.data_mut().iter_mut().zip(attn.y.data()) {
            *m += a;
        }
        let (ffn_normed, ffn_norm_inv) = rms_rows(&mid, &l.ffn_norm);
        let ffn = match &l.ffn {
            FfnParams::Dense(d) => FfnForward::Dense(dense_ffn_forward(&ffn_normed, d)),
            FfnParams::Moe(m) => FfnForward::Moe(moe_forward(&ffn_normed, m)),
        };
        let mut next = mid.clone();
        for (nv, &f) in next.data_mut().iter_mut().zip(ffn.y().data()) {
            *nv += f;
        }
        layers.push(LayerForward {
            x_in: x,
            attn_norm_inv,
            attn_normed,
            attn,
            mid,
            ffn_norm_inv,
            ffn_normed,
            ffn,
        });
        x = next;
    }

    let (final_normed, final_norm_inv) = rms_rows(&x, &params.final_norm);
    let mut logits = Tensor::zeros(&[n, cfg.vocab_size]);
    matmul_accum(
        final_normed.data(),
        params.head.data(),
        n,
        d_h,
        cfg.vocab_size,
        logits.data_mut(),
    );
    LmForward {
        layers,
        final_in: x,
        final_norm_inv,
        final_normed,
        logits,
    }
}

/// Backward through the whole model. `extra_score_grads[i]`, when present,
/// is added to layer i's router score gradients (the sparsity regularizer
/// path). Returns gradients in a params-shaped container.
pub fn lm_backward<T: Scalar>(
    params: &LmParams<T>,
    cfg: &LmConfig,
    fwd: &LmForward<T>,
    tokens: &[usize],
    dlogits: &Tensor<T>,
    extra_score_grads: &[Option<Tensor<T>>],
) -> LmParams<T> {
    let n = tokens.len();
    let d_h = cfg.hidden_dim;
    let ctx = cfg.context;
    let mut grads = params.zeros_like();

    // Head and final norm.
    matmul_accum_at(
        fwd.final_normed.data(),
        dlogits.data(),
        n,
        d_h,
        cfg.vocab_size,
        grads.head.data_mut(),
    );
    let mut d_final_normed = Tensor::zeros(&[n, d_h]);
    matmul_accum_bt(
        dlogits.data(),
        params.head.data(),
        n,
        d_h,
        cfg.vocab_size,
        d_final_normed.data_mut(),
    );
    let mut dx = Tensor::zeros(&[n, d_h]);
    rms_rows_backward(
        &fwd.final_in,
        &params.final_norm,
        &fwd.final_norm_inv,
        &d_final_normed,
        &mut dx,
        &mut grads.final_norm,
    );

    for (i, (l, lf)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let lg = &mut grads.layers[i];
        // FFN block: residual means dmid gets dx both directly and through
        // the FFN.
        let (d_ffn_normed, ()) = match (&l.ffn, &lf.ffn) {
            (FfnParams::Dense(p), FfnForward::Dense(f)) => {
                let (dn, g) = dense_ffn_backward(&lf.ffn_normed, p, f, &dx);
                let FfnParams::Dense(dst) = &mut lg.ffn else { unreachable!() };
                dst.gate = g.gate;
                dst.up = g.up;
                dst.down = g.down;
                (dn, ())
            }
            (FfnParams::Moe(p), FfnForward::Moe(f)) => {
                let (dn, g) = moe_backward(&lf.ffn_normed, p, f, &dx, extra_score_grads[i].as_ref());
                let FfnParams::Moe(dst) = &mut lg.ffn else { unreachable!() };
                dst.router.weight = g.router.weight;
                dst.router.alpha = g.router.alpha;
                dst.experts.up = g.experts.up;
                dst.experts.down = g.experts.down;
                dst.experts.gate = g.experts.gate;
                dst.experts.rms_weight = g.experts.rms_weight;
                dst.shared.gate = g.shared.gate;
                dst.shared.up = g.shared.up;
                dst.shared.down = g.shared.down;
                (dn, ())
            }
            _ => unreachable!("forward/params FFN kinds agree"),
        };
        let mut dmid = dx; // residual path
        rms_rows_backward(
            &lf.mid,
            &l.ffn_norm,
            &lf.ffn_norm_inv,
            &d_ffn_normed,
            &mut dmid,
            &mut lg.ffn_norm,
        );

        // Attention block.
        let (d_attn_normed, attn_grads): (Tensor<T>, AttnGrads<T>) =
            attn_backward(&lf.attn_normed, &l.attn, &lf.attn, &dmid);
        lg.attn.wq = attn_grads.wq;
        lg.attn.wk = attn_grads.wk;
        lg.attn.wv = attn_grads.wv;
        lg.attn.wo = attn_grads.wo;
        let mut dx_in = dmid; // residual path
        rms_rows_backward(
            &lf.x_in,
            &l.attn_norm,
            &lf.attn_norm_inv,
            &d_attn_normed,
            &mut dx_in,
            &mut lg.attn_norm,
        );
        dx = dx_in;
    }

    // Embeddings.
    for (r, &tok) in tokens.iter().enumerate() {
        let pos = r % ctx;
        let dx_row = dx.row(r);
        for (g, &d) in grads.embed.row_mut(tok).iter_mut().zip(dx_row) {
            *g += d;
        }
        for (g, &d) in grads.pos.row_mut(pos).iter_mut().zip(dx_row) {
            *g += d;
        }
    }
    grads
}

/// Mean cross-entropy over all positions plus its logits gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (f64, Tensor<T>) {
    let n = logits.rows();
    let v = logits.cols();
    debug_assert_eq!(targets.len(), n);
    let mut dlogits = logits.clone();
    let mut total = 0.0f64;
    let inv_n = T::from_f64(1.0 / n as f64);
    for r in 0..n {
        let row = dlogits.row_mut(r);
        crate::tensor::softmax_in_place(row);
        let p_target = row[targets[r]].as_f64();
        total -= p_target.max(1e-300).ln();
        row[targets[r]] -= T::one();
        for x in row.iter_mut() {
            *x *= inv_n;
        }
    }
    let _ = v;
    (total / n as f64, dlogits)
}

/// `exp(mean token cross-entropy)` over non-overlapping context windows of
/// `data`.
pub fn evaluate_ppl<T: Scalar>(params: &LmParams<T>, cfg: &LmConfig, data: &[u8]) -> f64 {
    let ctx = cfg.context;
    let n_windows = (data.len().saturating_sub(1)) / ctx;
    assert!(n_windows > 0, "evaluation slice shorter than one window");
    let mut total_ce = 0.0f64;
    let mut total_tokens = 0usize;
    for w in 0..n_windows {
        let start = w * ctx;
        let tokens: Vec<usize> = data[start..start + ctx].iter().map(|&b| b as usize).collect();
        let targets: Vec<usize> = data[start + 1..start + ctx + 1]
            .iter()
            .map(|&b| b as usize)
            .collect();
        let fwd = lm_forward(params, cfg, &tokens, 1);
        let (ce, _) = cross_entropy(&fwd.logits, &targets);
        total_ce += ce * ctx as f64;
        total_tokens += ctx;
    }
    (total_ce / total_tokens as f64).exp()
}
