//! Pre-norm causal multi-head self-attention with learned positional
//! embeddings handled by the caller. Scores use the fixed-tree `dot` kernel;
//! context accumulation runs over keys in ascending position order.

use crate::tensor::{dot, matmul_accum, matmul_accum_at, matmul_accum_bt, softmax_in_place, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    /// All `[d_h, d_h]`, laid out `[in, out]`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttnForward<T> {
    pub y: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Softmax rows per (sequence, head): `[n_seqs * n_heads, T, T]`,
    /// zero above the diagonal.
    probs: Vec<T>,
    /// Concatenated head outputs before the output projection.
    ctx: Tensor<T>,
    n_heads: usize,
    seq_len: usize,
}

/// `x` is `[n_seqs * seq_len, d_h]`, sequence-major.
pub fn attn_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttnParams<T>,
    n_heads: usize,
    seq_len: usize,
) -> AttnForward<T> {
    let n = x.rows();
    let d_h = x.cols();
    let n_seqs = n / seq_len;
    let head_dim = d_h / n_heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());

    let mut q = Tensor::zeros(&[n, d_h]);
    let mut k = Tensor::zeros(&[n, d_h]);
    let mut v = Tensor::zeros(&[n, d_h]);
    matmul_accum(x.data(), params.wq.data(), n, d_h, d_h, q.data_mut());
    matmul_accum(x.data(), params.wk.data(), n, d_h, d_h, k.data_mut());
    matmul_accum(x.data(), params.wv.data(), n, d_h, d_h, v.data_mut());

    let mut probs = vec![T::zero(); n_seqs * n_heads * seq_len * seq_len];
    let mut ctx = Tensor::zeros(&[n, d_h]);

    for s in 0..n_seqs {
        let base = s * seq_len;
        for h in 0..n_heads {
            let hs = h * head_dim;
            let p_base = (s * n_heads + h) * seq_len * seq_len;
            for t in 0..seq_len {
                let q_row = &q.row(base + t)[hs..hs + head_dim];
                let p_row = &mut probs[p_base + t * seq_len..p_base + t * seq_len + t + 1];
                for (u, pv) in p_row.iter_mut().enumerate() {
                    *pv = dot(q_row, &k.row(base + u)[hs..hs + head_dim]) * scale;
                }
                softmax_in_place(p_row);
                let ctx_row = &mut ctx.row_mut(base + t)[hs..hs + head_dim];
                for u in 0..=t {
                    let w = probs[p_base + t * seq_len + u];
                    let v_row = &v.row(base + u)[hs..hs + head_dim];
                    for (c, &vv) in ctx_row.iter_mut().zip(v_row) {
                        *c += w * vv;
                    }
                }
            }
        }
    }

    let mut y = Tensor::zeros(&[n, d_h]);
    matmul_accum(ctx.data(), params.wo.data(), n, d_h, d_h, y.data_mut());

    AttnForward {
        y,
        q,
        k,
        v,
        probs,
        ctx,
        n_heads,
        seq_len,
    }
}

#[derive(Debug, Clone)]
pub struct AttnGrads<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

pub fn attn_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttnParams<T>,
    fwd: &AttnForward<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, AttnGrads<T>) {
    let n = x.rows();
    let d_h = x.cols();
    let n_heads = fwd.n_heads;
    let seq_len = fwd.seq_len;
    let n_seqs = n / seq_len;
    let head_dim = d_h / n_heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());

    let mut grad_wo = Tensor::zeros(&[d_h, d_h]);
    matmul_accum_at(fwd.ctx.data(), dy.data(), n, d_h, d_h, grad_wo.data_mut());
    let mut dctx = Tensor::zeros(&[n, d_h]);
    matmul_accum_bt(dy.data(), params.wo.data(), n, d_h, d_h, dctx.data_mut());

    let mut dq = Tensor::zeros(&[n, d_h]);
    let mut dk = Tensor::zeros(&[n, d_h]);
    let mut dv = Tensor::zeros(&[n, d_h]);
    let mut dprobs = vec![T::zero(); seq_len];

    for s in 0..n_seqs {
        let base = s * seq_len;
        for h in 0..n_heads {
            let hs = h * head_dim;
            let p_base = (s * n_heads + h) * seq_len * seq_len;
            for t in 0..seq_len {
                let dctx_row = &dctx.row(t + base)[hs..hs + head_dim];
                let p_row = &fwd.probs[p_base + t * seq_len..p_base + t * seq_len + t + 1];

                // dprobs and dv.
                for u in 0..=t {
                    dprobs[u] = dot(dctx_row, &fwd.v.row(base + u)[hs..hs + head_dim]);
                    let dv_row = &mut dv.row_mut(base + u)[hs..hs + head_dim];
                    let w = p_row[u];
                    for (dvv, &dc) in dv_row.iter_mut().zip(dctx_row) {
                        *dvv += w * dc;
                    }
                }

                // Softmax backward: ds_u = p_u * (dp_u - sum_w dp_w p_w).
                let mut mean = T::zero();
                for u in 0..=t {
                    mean += dprobs[u] * p_row[u];
                }
                let q_row = fwd.q.row(base + t)[hs..hs + head_dim].to_vec();
                let dq_row = &mut dq.row_mut(base + t)[hs..hs + head_dim];
                for u in 0..=t {
                    let ds = p_row[u] * (dprobs[u] - mean) * scale;
                    let k_row = &fwd.k.row(base + u)[hs..hs + head_dim];
                    for (dqv, &kv) in dq_row.iter_mut().zip(k_row) {
                        *dqv += ds * kv;
                    }
                    let dk_row = &mut dk.row_mut(base + u)[hs..hs + head_dim];
                    for (dkv, &qv) in dk_row.iter_mut().zip(q_row.iter()) {
                        *dkv += ds * qv;
                    }
                }
            }
        }
    }

    let mut grad_wq = Tensor::zeros(&[d_h, d_h]);
    let mut grad_wk = Tensor::zeros(&[d_h, d_h]);
    let mut grad_wv = Tensor::zeros(&[d_h, d_h]);
    matmul_accum_at(x.data(), dq.data(), n, d_h, d_h, grad_wq.data_mut());
    matmul_accum_at(x.data(), dk.data(), n, d_h, d_h, grad_wk.data_mut());
    matmul_accum_at(x.data(), dv.data(), n, d_h, d_h, grad_wv.data_mut());

    let mut grad_x = Tensor::zeros(&[n, d_h]);
    matmul_accum_bt(dq.data(), params.wq.data(), n, d_h, d_h, grad_x.data_mut());
    matmul_accum_bt(dk.data(), params.wk.data(), n, d_h, d_h, grad_x.data_mut());
    matmul_accum_bt(dv.data(), params.wv.data(), n, d_h, d_h, grad_x.data_mut());

    (
        grad_x,
        AttnGrads {
            wq: grad_wq,
            wk: grad_wk,
            wv: grad_wv,
            wo: grad_wo,
        },
    )
}
