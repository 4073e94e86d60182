use std::cmp::Ordering;

use crate::error::{shape_err, GradError, Result};
use crate::tensor::{Backward, BackwardCtx, Tensor};

/// Score written into positions dropped by [`topk_mask`]. Finite so softmax stays finite.
pub const MASK_VALUE: f64 = -1e9;

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(GradError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: Vec::new(),
        }),
    }
}

struct SoftmaxRule(usize);
impl Backward for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let c = self.0;
        vec![ctx.needs[0].then(|| {
            let mut dx = Vec::with_capacity(ctx.grad.len());
            for (y, g) in ctx.out.data().chunks_exact(c).zip(ctx.grad.chunks_exact(c)) {
                let s: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                dx.extend(y.iter().zip(g).map(|(yv, gv)| yv * (gv - s)));
            }
            dx
        })]
    }
}

/// Softmax over the last dimension, stabilised by the per-row max.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    let c = last_dim("softmax_rows", s)?;
    let mut data = Vec::with_capacity(s.numel());
    for row in s.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|e| *e /= total);
    }
    Ok(Tensor::from_op(data, s.shape().to_vec(), &[s], SoftmaxRule(c)))
}

struct TopkRule {
    kept: Vec<bool>,
}
impl Backward for TopkRule {
    fn name(&self) -> &'static str {
        "topk_mask"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(&self.kept)
                .map(|(&g, &k)| if k { g } else { 0.0 })
                .collect()
        })]
    }
}

/// Keeps the `k` largest entries of each last-dim row and overwrites the rest with
/// [`MASK_VALUE`]. Ties go to the lower column index.
pub fn topk_mask(s: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(GradError::Config {
            op: "topk_mask",
            msg: "k must be >= 1".into(),
        });
    }
    let c = last_dim("topk_mask", s)?;
    let mut kept = vec![true; s.numel()];
    let mut data = s.data().to_vec();
    if k < c {
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for (row, keep) in data.chunks_exact_mut(c).zip(kept.chunks_exact_mut(c)) {
            order.clear();
            order.extend(0..c);
            let by_rank = |&a: &usize, &b: &usize| -> Ordering {
                row[b].total_cmp(&row[a]).then(a.cmp(&b))
            };
            order.select_nth_unstable_by(k - 1, by_rank);
            keep.iter_mut().for_each(|v| *v = false);
            for &j in &order[..k] {
                keep[j] = true;
            }
            for (v, &kp) in row.iter_mut().zip(keep.iter()) {
                if !kp {
                    *v = MASK_VALUE;
                }
            }
        }
    }
    Ok(Tensor::from_op(data, s.shape().to_vec(), &[s], TopkRule { kept }))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct LayerNormRule {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    width: usize,
}
impl Backward for LayerNormRule {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = self.width;
        let gamma = ctx.parents[1].data();
        let dx = ctx.needs[0].then(|| {
            let mut dx = Vec::with_capacity(ctx.grad.len());
            let rows = ctx.grad.chunks_exact(d).zip(self.xhat.chunks_exact(d));
            for ((g, xh), &inv) in rows.zip(&self.inv_std) {
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..d {
                    let dxh = g[j] * gamma[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                }
                mean_dxh /= d as f64;
                mean_dxh_xh /= d as f64;
                dx.extend((0..d).map(|j| inv * (g[j] * gamma[j] - mean_dxh - xh[j] * mean_dxh_xh)));
            }
            dx
        });
        let dgamma = ctx.needs[1].then(|| {
            let mut acc = vec![0.0; d];
            for (g, xh) in ctx.grad.chunks_exact(d).zip(self.xhat.chunks_exact(d)) {
                for j in 0..d {
                    acc[j] += g[j] * xh[j];
                }
            }
            acc
        });
        let dbeta = ctx.needs[2].then(|| {
            let mut acc = vec![0.0; d];
            for g in ctx.grad.chunks_exact(d) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            acc
        });
        vec![dx, dgamma, dbeta]
    }
}

/// Layer normalization over the last dimension (population variance).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = last_dim("layer_norm", x)?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / d;
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mu) * inv;
            xhat.push(h);
            data.push(h * gamma.data()[j] + beta.data()[j]);
        }
    }
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        &[x, gamma, beta],
        LayerNormRule {
            xhat,
            inv_std,
            width: d,
        },
    ))
}

struct CrossEntropyRule {
    probs: Vec<f64>,
    targets: Vec<usize>,
    classes: usize,
}
impl Backward for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let scale = ctx.grad[0] / self.targets.len() as f64;
        vec![ctx.needs[0].then(|| {
            let mut g = self.probs.clone();
            for (row, &t) in g.chunks_exact_mut(self.classes).zip(&self.targets) {
                row[t] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            g
        })]
    }
}

/// Mean softmax cross-entropy of `[B, C]` logits against class ids.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let &[b, c] = logits.shape() else {
        return Err(shape_err("cross_entropy", logits.shape(), &[targets.len()]));
    };
    if b != targets.len() || b == 0 {
        return Err(shape_err("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(GradError::Contract(format!("target class {t} outside [0, {c})")));
    }
    let mut probs = Vec::with_capacity(b * c);
    let mut loss = 0.0;
    for (row, &t) in logits.data().chunks_exact(c).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[t];
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Ok(Tensor::from_op(
        vec![loss / b as f64],
        Vec::new(),
        &[logits],
        CrossEntropyRule {
            probs,
            targets: targets.to_vec(),
            classes: c,
        },
    ))
}

struct MseRule(Vec<f64>);
impl Backward for MseRule {
    fn name(&self) -> &'static str {
        "mse_loss"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let n = self.0.len() as f64;
        let pred = ctx.parents[0].data();
        vec![ctx.needs[0].then(|| {
            pred.iter()
                .zip(&self.0)
                .map(|(p, t)| ctx.grad[0] * 2.0 * (p - t) / n)
                .collect()
        })]
    }
}

/// Mean squared error against fixed targets.
pub fn mse_loss(pred: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if pred.numel() != targets.len() || targets.is_empty() {
        return Err(shape_err("mse_loss", pred.shape(), &[targets.len()]));
    }
    let n = targets.len() as f64;
    let loss = pred.data().iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    Ok(Tensor::from_op(vec![loss], Vec::new(), &[pred], MseRule(targets.to_vec())))
}

struct NumericEmbedRule {
    values: Vec<f64>,
    features: usize,
    width: usize,
}
impl Backward for NumericEmbedRule {
    fn name(&self) -> &'static str {
        "numeric_embed"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (n, d) = (self.features, self.width);
        let tokens = ctx.grad.chunks_exact(d).zip(&self.values);
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0; n * d];
            for (t, (g, &x)) in tokens.clone().enumerate() {
                let j = t % n;
                dw[j * d..(j + 1) * d].iter_mut().zip(g).for_each(|(a, gv)| *a += x * gv);
            }
            dw
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![0.0; n * d];
            for (t, g) in ctx.grad.chunks_exact(d).enumerate() {
                let j = t % n;
                db[j * d..(j + 1) * d].iter_mut().zip(g).for_each(|(a, gv)| *a += gv);
            }
            db
        });
        vec![None, dw, db]
    }
}

/// Per-feature affine embedding: token `j` of sample `i` is `x[i,j]·w[j] + b[j]`.
///
/// `values` is a constant `[B, N]` tensor; `w` and `b` are `[N, d]`. Output `[B, N, d]`.
pub fn numeric_embed(values: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let &[batch, n] = values.shape() else {
        return Err(shape_err("numeric_embed", values.shape(), w.shape()));
    };
    let &[wn, d] = w.shape() else {
        return Err(shape_err("numeric_embed", values.shape(), w.shape()));
    };
    if wn != n || b.shape() != w.shape() {
        return Err(shape_err("numeric_embed", values.shape(), w.shape()));
    }
    let mut data = Vec::with_capacity(batch * n * d);
    for (t, &x) in values.data().iter().enumerate() {
        let j = t % n;
        let (wr, br) = (&w.data()[j * d..(j + 1) * d], &b.data()[j * d..(j + 1) * d]);
        data.extend(wr.iter().zip(br).map(|(wv, bv)| x * wv + bv));
    }
    Ok(Tensor::from_op(
        data,
        vec![batch, n, d],
        &[values, w, b],
        NumericEmbedRule {
            values: values.to_vec(),
            features: n,
            width: d,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::param(v.to_vec(), &[1, v.len()]).unwrap()
    }

    #[test]
    fn uniform_row() {
        let y = softmax_rows(&row(&[0.0, 0.0, 0.0])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_dominates() {
        let y = softmax_rows(&row(&[2.5, MASK_VALUE, MASK_VALUE])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_rows_are_rejected() {
        let t = Tensor::new(vec![], &[3, 0]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(GradError::Shape { .. })));
    }

    #[test]
    fn topk_forced_selection() {
        let y = topk_mask(&row(&[0.1, 0.9, 0.5]), 2).unwrap();
        assert_eq!(y.data(), &[MASK_VALUE, 0.9, 0.5]);
    }

    #[test]
    fn topk_degenerate_k_is_identity() {
        let x = row(&[0.3, -1.0, 2.0]);
        assert_eq!(topk_mask(&x, 3).unwrap().data(), x.data());
        assert_eq!(topk_mask(&x, 10).unwrap().data(), x.data());
        assert!(topk_mask(&x, 0).is_err());
    }

    #[test]
    fn topk_ties_keep_lowest_index() {
        let y = topk_mask(&row(&[0.5, 0.5, 0.1]), 1).unwrap();
        assert_eq!(y.data(), &[0.5, MASK_VALUE, MASK_VALUE]);
        let y = topk_mask(&row(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, MASK_VALUE, MASK_VALUE]);
    }

    #[test]
    fn masked_positions_get_exactly_zero_gradient() {
        let s = row(&[0.3, 0.1, 0.7, 0.2]);
        let w = softmax_rows(&topk_mask(&s, 2).unwrap()).unwrap();
        let c = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        crate::ops::sum(&crate::ops::mul(&w, &c).unwrap()).backward().unwrap();
        let g = s.grad().unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[0] != 0.0 && g[2] != 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = Tensor::param(vec![0.0; 8], &[2, 4]).unwrap();
        let loss = cross_entropy(&l, &[1, 3]).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&l, &[1, 4]).is_err());
    }

    #[test]
    fn numeric_embed_zero_input_gives_bias() {
        let x = Tensor::new(vec![0.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::param(vec![0.5, 0.5, -1.0, -1.0], &[2, 2]).unwrap();
        let e = numeric_embed(&x, &w, &b).unwrap();
        assert_eq!(e.shape(), &[1, 2, 2]);
        assert_eq!(e.data(), &[0.5, 0.5, 5.0, 7.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let g = Tensor::new(vec![1.0; 4], &[4]).unwrap();
        let b = Tensor::new(vec![0.0; 4], &[4]).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }
}
