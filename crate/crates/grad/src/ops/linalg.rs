use crate::error::{shape_err, GradError, Result};
use crate::tensor::{Backward, BackwardCtx, Tensor};

/// `c[m×p] += op(a) · op(b)` where `op(a)` is `m×n` and `op(b)` is `n×p`.
///
/// `ta`/`tb` mean the operand is stored transposed (`a` as `n×m`, `b` as `p×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    n: usize,
    p: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    if m == 0 || n == 0 || p == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (n as isize, 1) };
    let (rsb, csb) = if tb { (1, n as isize) } else { (p as isize, 1) };
    // SAFETY: the strides address exactly the m·n, n·p and m·p elements
    // checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// Geometry of `op(a) · op(b)` with optional batching on either side.
#[derive(Clone, Copy, Debug)]
struct Plan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    n: usize,
    p: usize,
    ta: bool,
    tb: bool,
}

impl Plan {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let split = |s: &[usize]| -> Option<(Option<usize>, usize, usize)> {
            match *s {
                [r, c] => Some((None, r, c)),
                [bt, r, c] => Some((Some(bt), r, c)),
                _ => None,
            }
        };
        let err = || shape_err("matmul", a, b);
        let (ab, ar, ac) = split(a).ok_or_else(err)?;
        let (bb, br, bc) = split(b).ok_or_else(err)?;
        let (m, n) = if ta { (ac, ar) } else { (ar, ac) };
        let (n2, p) = if tb { (bc, br) } else { (br, bc) };
        if n != n2 {
            return Err(err());
        }
        let batch = match (ab, bb) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(Self {
            batch,
            a_batched: ab.is_some(),
            b_batched: bb.is_some(),
            m,
            n,
            p,
            ta,
            tb,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.p]
        } else {
            vec![self.m, self.p]
        }
    }

    /// A batched lhs against a shared rhs is one tall product.
    fn foldable(&self) -> bool {
        self.a_batched && !self.b_batched && !self.ta
    }

    fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, n, p) = (self.m, self.n, self.p);
        let mut out = vec![0.0; self.batch * m * p];
        if self.foldable() {
            gemm(a, b, &mut out, self.batch * m, n, p, false, self.tb);
            return out;
        }
        for bi in 0..self.batch {
            let ablk = if self.a_batched { &a[bi * m * n..(bi + 1) * m * n] } else { a };
            let bblk = if self.b_batched { &b[bi * n * p..(bi + 1) * n * p] } else { b };
            gemm(ablk, bblk, &mut out[bi * m * p..(bi + 1) * m * p], m, n, p, self.ta, self.tb);
        }
        out
    }

    fn grad_a(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, n, p) = (self.m, self.n, self.p);
        let mut da = vec![0.0; if self.a_batched { self.batch } else { 1 } * m * n];
        if self.foldable() {
            gemm(g, b, &mut da, self.batch * m, p, n, false, !self.tb);
            return da;
        }
        for bi in 0..self.batch {
            let gblk = &g[bi * m * p..(bi + 1) * m * p];
            let bblk = if self.b_batched { &b[bi * n * p..(bi + 1) * n * p] } else { b };
            let dblk = if self.a_batched { &mut da[bi * m * n..(bi + 1) * m * n] } else { &mut da[..] };
            if self.ta {
                gemm(bblk, gblk, dblk, n, p, m, self.tb, true);
            } else {
                gemm(gblk, bblk, dblk, m, p, n, false, !self.tb);
            }
        }
        da
    }

    fn grad_b(&self, g: &[f64], a: &[f64]) -> Vec<f64> {
        let (m, n, p) = (self.m, self.n, self.p);
        let mut db = vec![0.0; if self.b_batched { self.batch } else { 1 } * n * p];
        if self.foldable() {
            let rows = self.batch * m;
            if self.tb {
                gemm(g, a, &mut db, p, rows, n, true, false);
            } else {
                gemm(a, g, &mut db, n, rows, p, true, false);
            }
            return db;
        }
        for bi in 0..self.batch {
            let gblk = &g[bi * m * p..(bi + 1) * m * p];
            let ablk = if self.a_batched { &a[bi * m * n..(bi + 1) * m * n] } else { a };
            let dblk = if self.b_batched { &mut db[bi * n * p..(bi + 1) * n * p] } else { &mut db[..] };
            if self.tb {
                gemm(gblk, ablk, dblk, p, m, n, true, self.ta);
            } else {
                gemm(ablk, gblk, dblk, n, m, p, !self.ta, false);
            }
        }
        db
    }
}

struct MatmulRule(Plan);
impl Backward for MatmulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
        vec![
            ctx.needs[0].then(|| self.0.grad_a(ctx.grad, b)),
            ctx.needs[1].then(|| self.0.grad_b(ctx.grad, a)),
        ]
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    batch_matmul(a, b, false, false)
}

/// `op(a) · op(b)` over rank-2 or rank-3 operands.
///
/// A rank-3 operand is a batch of matrices; a rank-2 operand is shared across the
/// batch of the other side. `trans_a`/`trans_b` transpose the trailing two dims.
pub fn batch_matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let plan = Plan::new(a.shape(), b.shape(), trans_a, trans_b)?;
    let data = plan.forward(a.data(), b.data());
    Ok(Tensor::from_op(data, plan.out_shape(), &[a, b], MatmulRule(plan)))
}

fn transpose_last2(data: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    out
}

struct TransposeRule {
    batch: usize,
    rows: usize,
    cols: usize,
}
impl Backward for TransposeRule {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| transpose_last2(ctx.grad, self.batch, self.cols, self.rows))]
    }
}

/// Swaps the last two dimensions.
pub fn transpose(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(GradError::Contract(format!("transpose needs rank >= 2, got {s:?}")));
    }
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = s[..s.len() - 2].iter().product();
    let data = transpose_last2(t.data(), batch, r, c);
    let mut shape = s.to_vec();
    let len = shape.len();
    shape.swap(len - 2, len - 1);
    Ok(Tensor::from_op(
        data,
        shape,
        &[t],
        TransposeRule {
            batch,
            rows: r,
            cols: c,
        },
    ))
}

/// Affine map over the last dimension: `x · w + b`, `w` of shape `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() == 0 || x.shape()[x.rank() - 1] != w.shape()[0] {
        return Err(shape_err("linear", x.shape(), w.shape()));
    }
    let lead = &x.shape()[..x.rank() - 1];
    let rows: usize = lead.iter().product();
    let flat = super::reshape(x, &[rows, w.shape()[0]])?;
    let mut y = matmul(&flat, w)?;
    if let Some(b) = b {
        y = super::add_broadcast(&y, b)?;
    }
    let mut shape = lead.to_vec();
    shape.push(w.shape()[1]);
    super::reshape(&y, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::param(v.to_vec(), &[rows, cols]).unwrap()
    }

    #[test]
    fn identity_product() {
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &i).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let c = matmul(&m(1, 2, &[1.0, 2.0]), &m(2, 1, &[3.0, 4.0])).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch_names_shapes() {
        let err = matmul(&m(2, 3, &[0.0; 6]), &m(2, 3, &[0.0; 6])).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
    }

    #[test]
    fn matmul_gradients_follow_transpose_rules() {
        // dL/dA = G·Bᵀ, dL/dB = Aᵀ·G with G = ones.
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        crate::ops::sum(&matmul(&a, &b).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn transpose_is_involution() {
        let t = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let tt = transpose(&t).unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&tt).unwrap().data(), t.data());
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2, 3, 4]);
        let b = Tensor::zeros(&[3, 4, 5]);
        assert!(batch_matmul(&a, &b, false, false).is_err());
    }
}
