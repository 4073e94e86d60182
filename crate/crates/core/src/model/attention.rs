//! Additive and multiplicative attention streams and their fusion.
//!
//! Both streams share one scoring path: queries against keys, scaled by
//! `1/√d_head`, top-k masked and row-softmaxed. The additive stream returns the
//! weighted sum of values. The multiplicative stream runs the same path on
//! `ln(ReLU(x) + ε)` and exponentiates the weighted sum, so each output entry is
//! a weighted geometric mean `Π vⱼ^wⱼ` of the projected inputs.

use amformer_grad::ops::{
    batch_matmul, exp_clamped, linear, log_eps, merge_heads, mul_const, repeat_batch, scale,
    softmax_rows, split_heads, topk_mask, vconcat,
};
use amformer_grad::{GradError, Tensor};
use rand::Rng as _;

use std::cell::Cell;

use crate::error::Result;
use crate::rng::Rng;

thread_local! {
    static TOPK_GAP: Cell<Option<f64>> = const { Cell::new(None) };
}

/// Runs `f` and also returns the smallest gap between the k-th and (k+1)-th
/// largest score over every top-k masked row scored inside it (infinite when no
/// row was masked). A small gap means a tiny parameter change can swap which
/// keys are kept.
pub fn min_topk_gap<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let outer = TOPK_GAP.with(|g| g.replace(Some(f64::INFINITY)));
    let r = f();
    let gap = TOPK_GAP.with(|g| g.replace(outer)).unwrap_or(f64::INFINITY);
    if let Some(o) = outer {
        TOPK_GAP.with(|g| g.set(Some(o.min(gap))));
    }
    (r, gap)
}

fn record_gaps(scores: &[f64], n: usize, k: usize) {
    TOPK_GAP.with(|g| {
        if let Some(cur) = g.get() {
            let mut row = vec![0.0; n];
            let gap = scores.chunks_exact(n).fold(cur, |m, r| {
                row.copy_from_slice(r);
                row.sort_by(|a, b| b.total_cmp(a));
                m.min(row[k - 1] - row[k])
            });
            g.set(Some(gap));
        }
    });
}

/// Where a stream's queries come from.
#[derive(Clone, Copy)]
pub enum Query<'a> {
    /// `x · W^Q`, one query per input token.
    Project(&'a Tensor),
    /// A trainable `[N_p, d]` prompt matrix shared across the batch.
    Prompt(&'a Tensor),
}

#[derive(Clone, Copy)]
pub struct Projections<'a> {
    pub query: Query<'a>,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub heads: usize,
    pub k: usize,
}

/// Inverted dropout: zeroes entries with probability `p`, rescales the rest by `1/(1−p)`.
pub fn dropout(t: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(t.clone());
    }
    let s = 1.0 / (1.0 - p);
    let mask = (0..t.numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { s })
        .collect();
    Ok(mul_const(t, mask)?)
}

fn queries(x: &Tensor, query: Query<'_>) -> Result<Tensor> {
    match query {
        Query::Project(wq) => Ok(linear(x, wq, None)?),
        Query::Prompt(p) => {
            let d = x.shape().last().copied().unwrap_or(0);
            if p.rank() != 2 || p.shape()[1] != d {
                return Err(GradError::Shape {
                    op: "prompt",
                    lhs: p.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                }
                .into());
            }
            Ok(repeat_batch(p, x.shape()[0]))
        }
    }
}

/// Attention weights `softmax(topk(Q·Kᵀ/√d_head))`, shape `[B·H, N_q, N]`.
pub fn attention_weights(x: &Tensor, proj: &Projections<'_>, shape: AttnShape) -> Result<Tensor> {
    let q = split_heads(&queries(x, proj.query)?, shape.heads)?;
    let k = split_heads(&linear(x, proj.wk, None)?, shape.heads)?;
    let dh = q.shape()[2];
    let s = scale(&batch_matmul(&q, &k, false, true)?, 1.0 / (dh as f64).sqrt());
    let n = s.shape()[2];
    let s = if shape.k < n {
        record_gaps(s.data(), n, shape.k);
        topk_mask(&s, shape.k)?
    } else {
        s
    };
    Ok(softmax_rows(&s)?)
}

/// `weights · V` per head, heads merged back: `[B, N_q, d]`.
pub fn combine(weights: &Tensor, values: &Tensor, heads: usize) -> Result<Tensor> {
    let v = split_heads(values, heads)?;
    Ok(merge_heads(&batch_matmul(weights, &v, false, false)?, heads)?)
}

fn stream(
    x: &Tensor,
    proj: &Projections<'_>,
    shape: AttnShape,
    drop: Option<(f64, &mut Rng)>,
) -> Result<Tensor> {
    let mut w = attention_weights(x, proj, shape)?;
    if let Some((p, rng)) = drop {
        w = dropout(&w, p, rng)?;
    }
    combine(&w, &linear(x, proj.wv, None)?, shape.heads)
}

/// Output `O^A`: weighted sum of value rows, `[B, N_q, d]`.
pub fn additive_stream(
    x: &Tensor,
    proj: &Projections<'_>,
    shape: AttnShape,
    drop: Option<(f64, &mut Rng)>,
) -> Result<Tensor> {
    stream(x, proj, shape, drop)
}

/// Output `O^M = exp(W · V_log)` with `V_log = ln(ReLU(x) + ε) · W^V`. Projected
/// queries come from the log-space inputs; prompts are used as given.
pub fn multiplicative_stream(
    x: &Tensor,
    proj: &Projections<'_>,
    shape: AttnShape,
    eps: f64,
    clamp: (f64, f64),
    drop: Option<(f64, &mut Rng)>,
) -> Result<Tensor> {
    let x_log = log_eps(x, eps)?;
    let out = stream(&x_log, proj, shape, drop)?;
    Ok(exp_clamped(&out, clamp.0, clamp.1)?)
}

/// `exp(W · (ln(ReLU(x) + ε) · W^V))` for explicitly supplied weights `[B·H, N_q, N]`.
pub fn geometric_mix(
    weights: &Tensor,
    x: &Tensor,
    wv: &Tensor,
    heads: usize,
    eps: f64,
    clamp: (f64, f64),
) -> Result<Tensor> {
    let v_log = linear(&log_eps(x, eps)?, wv, None)?;
    Ok(exp_clamped(&combine(weights, &v_log, heads)?, clamp.0, clamp.1)?)
}

/// Mixes the stacked candidates `[O^A; O^M]` (`2R` rows) down to `R` rows:
/// `O = W_fc · [O^A; O^M]` with `W_fc` of shape `[R, 2R]`.
///
/// There is no bias: a per-row constant is removed by the layer norm that
/// every consumer of `O` applies, so it could never receive gradient.
pub fn fuse(oa: &Tensor, om: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(batch_matmul(w, &vconcat(oa, om)?, false, false)?)
}
