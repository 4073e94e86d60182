use crate::error::{shape_err, GradError, Result};
use crate::tensor::{Backward, BackwardCtx, Tensor};

struct ReshapeRule;
impl Backward for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
    }
}

pub fn reshape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != t.numel() {
        return Err(shape_err("reshape", t.shape(), shape));
    }
    Ok(Tensor::from_op(t.data().to_vec(), shape.to_vec(), &[t], ReshapeRule))
}

/// `(batch, rows, cols)` view of a rank-2 or rank-3 tensor.
fn as_3d(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

struct VConcatRule {
    batch: usize,
    a_rows: usize,
    b_rows: usize,
    cols: usize,
}
impl Backward for VConcatRule {
    fn name(&self) -> &'static str {
        "vconcat"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (ab, bb) = (self.a_rows * self.cols, self.b_rows * self.cols);
        let mut ga = ctx.needs[0].then(|| Vec::with_capacity(self.batch * ab));
        let mut gb = ctx.needs[1].then(|| Vec::with_capacity(self.batch * bb));
        for blk in ctx.grad.chunks_exact(ab + bb) {
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&blk[..ab]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&blk[ab..]);
            }
        }
        vec![ga, gb]
    }
}

/// Stacks rows: `[a×d] ++ [b×d] -> [(a+b)×d]`, batched over a leading dim when rank 3.
pub fn vconcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || shape_err("vconcat", a.shape(), b.shape());
    let (ba, ra, ca) = as_3d(a).ok_or_else(err)?;
    let (bb, rb, cb) = as_3d(b).ok_or_else(err)?;
    if a.rank() != b.rank() || ba != bb || ca != cb {
        return Err(err());
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..ba {
        data.extend_from_slice(&a.data()[bi * ra * ca..(bi + 1) * ra * ca]);
        data.extend_from_slice(&b.data()[bi * rb * cb..(bi + 1) * rb * cb]);
    }
    let mut shape = a.shape().to_vec();
    let len = shape.len();
    shape[len - 2] = ra + rb;
    Ok(Tensor::from_op(
        data,
        shape,
        &[a, b],
        VConcatRule {
            batch: ba,
            a_rows: ra,
            b_rows: rb,
            cols: ca,
        },
    ))
}

/// `[B, N, H·dh] <-> [B·H, N, dh]`.
fn heads_permute(src: &[f64], b: usize, n: usize, h: usize, dh: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..h {
                let merged = ((bi * n + ni) * h + hi) * dh;
                let split_at = ((bi * h + hi) * n + ni) * dh;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

struct HeadsRule {
    dims: (usize, usize, usize, usize),
    split: bool,
}
impl Backward for HeadsRule {
    fn name(&self) -> &'static str {
        if self.split {
            "split_heads"
        } else {
            "merge_heads"
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (b, n, h, dh) = self.dims;
        vec![ctx.needs[0].then(|| heads_permute(ctx.grad, b, n, h, dh, !self.split))]
    }
}

/// `[B, N, d] -> [B·H, N, d/H]`, head-major within each sample.
pub fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let &[b, n, d] = t.shape() else {
        return Err(GradError::Contract(format!("split_heads needs rank 3, got {:?}", t.shape())));
    };
    if heads == 0 || d % heads != 0 {
        return Err(GradError::Config {
            op: "split_heads",
            msg: format!("width {d} not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let data = heads_permute(t.data(), b, n, heads, dh, true);
    Ok(Tensor::from_op(
        data,
        vec![b * heads, n, dh],
        &[t],
        HeadsRule {
            dims: (b, n, heads, dh),
            split: true,
        },
    ))
}

/// Inverse of [`split_heads`].
pub fn merge_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let &[bh, n, dh] = t.shape() else {
        return Err(GradError::Contract(format!("merge_heads needs rank 3, got {:?}", t.shape())));
    };
    if heads == 0 || bh % heads != 0 {
        return Err(GradError::Config {
            op: "merge_heads",
            msg: format!("leading dim {bh} not divisible by {heads} heads"),
        });
    }
    let b = bh / heads;
    let data = heads_permute(t.data(), b, n, heads, dh, false);
    Ok(Tensor::from_op(
        data,
        vec![b, n, heads * dh],
        &[t],
        HeadsRule {
            dims: (b, n, heads, dh),
            split: false,
        },
    ))
}

struct RepeatRule;
impl Backward for RepeatRule {
    fn name(&self) -> &'static str {
        "repeat_batch"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let n = ctx.parents[0].numel();
        vec![ctx.needs[0].then(|| {
            let mut g = vec![0.0; n];
            for blk in ctx.grad.chunks_exact(n) {
                g.iter_mut().zip(blk).for_each(|(a, b)| *a += b);
            }
            g
        })]
    }
}

/// Tiles `t` along a new leading batch dimension.
pub fn repeat_batch(t: &Tensor, batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.numel() * batch);
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(t.shape());
    Tensor::from_op(data, shape, &[t], RepeatRule)
}

struct MeanRowsRule {
    rows: usize,
    cols: usize,
}
impl Backward for MeanRowsRule {
    fn name(&self) -> &'static str {
        "mean_rows"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.rows as f64;
        vec![ctx.needs[0].then(|| {
            let mut g = Vec::with_capacity(ctx.parents[0].numel());
            for gb in ctx.grad.chunks_exact(self.cols) {
                for _ in 0..self.rows {
                    g.extend(gb.iter().map(|v| v * inv));
                }
            }
            g
        })]
    }
}

/// Mean over the second-to-last dimension: `[..., N, d] -> [..., d]`.
pub fn mean_rows(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 2] == 0 {
        return Err(GradError::Contract(format!("mean_rows needs rank >= 2 and rows > 0, got {s:?}")));
    }
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    let inv = 1.0 / rows as f64;
    let mut data = Vec::with_capacity(t.numel() / rows);
    for blk in t.data().chunks_exact(rows * cols) {
        let mut acc = vec![0.0; cols];
        for row in blk.chunks_exact(cols) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        data.extend(acc.into_iter().map(|v| v * inv));
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.push(cols);
    Ok(Tensor::from_op(data, shape, &[t], MeanRowsRule { rows, cols }))
}

struct GatherRule {
    indices: Vec<usize>,
    width: usize,
}
impl Backward for GatherRule {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            let mut g = vec![0.0; ctx.parents[0].numel()];
            for (&idx, gr) in self.indices.iter().zip(ctx.grad.chunks_exact(self.width)) {
                g[idx * self.width..(idx + 1) * self.width]
                    .iter_mut()
                    .zip(gr)
                    .for_each(|(a, b)| *a += b);
            }
            g
        })]
    }
}

/// Row lookup into a `[V, d]` table, producing `[indices.len(), d]`.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let &[v, d] = table.shape() else {
        return Err(GradError::Contract(format!("gather_rows needs a rank-2 table, got {:?}", table.shape())));
    };
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= v {
            return Err(GradError::Contract(format!("row index {i} out of range for table of {v} rows")));
        }
        data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::from_op(
        data,
        vec![indices.len(), d],
        &[table],
        GatherRule {
            indices: indices.to_vec(),
            width: d,
        },
    ))
}
