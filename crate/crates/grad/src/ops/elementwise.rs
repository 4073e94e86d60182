use crate::error::{shape_err, GradError, Result};
use crate::tensor::{Backward, BackwardCtx, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

struct AddRule;
impl Backward for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        ctx.needs
            .iter()
            .map(|&n| n.then(|| ctx.grad.to_vec()))
            .collect()
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = zip_map(a, b, |x, y| x + y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a, b], AddRule))
}

struct SubRule;
impl Backward for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![
            ctx.needs[0].then(|| ctx.grad.to_vec()),
            ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
        ]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = zip_map(a, b, |x, y| x - y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a, b], SubRule))
}

struct MulRule;
impl Backward for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
        let prod = |other: &Tensor| ctx.grad.iter().zip(other.data()).map(|(g, v)| g * v).collect();
        vec![ctx.needs[0].then(|| prod(b)), ctx.needs[1].then(|| prod(a))]
    }
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = zip_map(a, b, |x, y| x * y);
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a, b], MulRule))
}

struct ScaleRule(f64);
impl Backward for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_op(data, a.shape().to_vec(), &[a], ScaleRule(factor))
}

struct MulConstRule(Vec<f64>);
impl Backward for MulConstRule {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.iter().zip(&self.0).map(|(g, m)| g * m).collect())]
    }
}

/// Multiplies by a fixed, non-differentiable array (dropout masks).
pub fn mul_const(a: &Tensor, factors: Vec<f64>) -> Result<Tensor> {
    if factors.len() != a.numel() {
        return Err(shape_err("mul_const", a.shape(), &[factors.len()]));
    }
    let data = a.data().iter().zip(&factors).map(|(x, m)| x * m).collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a], MulConstRule(factors)))
}

/// Broadcasting plan for `x + b` where `b` aligns with the trailing dims of `x`
/// and each of its dims either matches or is 1.
struct Broadcast {
    x_shape: Vec<usize>,
    b_shape: Vec<usize>,
    /// Fast path: `b` equals the suffix of `x`, so it repeats every `b.len()` elements.
    contiguous: bool,
}

impl Broadcast {
    fn new(x: &[usize], b: &[usize]) -> Result<Self> {
        if b.len() > x.len() {
            return Err(shape_err("add_broadcast", x, b));
        }
        let offset = x.len() - b.len();
        for (i, &bd) in b.iter().enumerate() {
            if bd != 1 && bd != x[offset + i] {
                return Err(shape_err("add_broadcast", x, b));
            }
        }
        Ok(Self {
            x_shape: x.to_vec(),
            b_shape: b.to_vec(),
            contiguous: x[offset..] == *b,
        })
    }

    /// Index into `b` for every flat index of `x`.
    fn b_index(&self) -> Vec<usize> {
        let n: usize = self.x_shape.iter().product();
        let offset = self.x_shape.len() - self.b_shape.len();
        let mut b_strides = vec![0usize; self.b_shape.len()];
        let mut acc = 1;
        for i in (0..self.b_shape.len()).rev() {
            b_strides[i] = if self.b_shape[i] == 1 { 0 } else { acc };
            acc *= self.b_shape[i];
        }
        let mut out = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            let mut idx = 0;
            for i in (0..self.b_shape.len()).rev() {
                let dim = self.x_shape[offset + i];
                idx += (rem % dim) * b_strides[i];
                rem /= dim;
            }
            out.push(idx);
        }
        out
    }
}

struct AddBroadcastRule(Broadcast);
impl Backward for AddBroadcastRule {
    fn name(&self) -> &'static str {
        "add_broadcast"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let gb = ctx.needs[1].then(|| {
            let bn = ctx.parents[1].numel();
            let mut gb = vec![0.0; bn];
            if self.0.contiguous {
                for chunk in ctx.grad.chunks_exact(bn) {
                    gb.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
                }
            } else {
                for (g, bi) in ctx.grad.iter().zip(self.0.b_index()) {
                    gb[bi] += g;
                }
            }
            gb
        });
        vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
    }
}

/// `x + b` with `b` broadcast over the leading dimensions of `x` (and over any
/// size-1 dimension of `b`).
pub fn add_broadcast(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = Broadcast::new(x.shape(), b.shape())?;
    let mut data = x.data().to_vec();
    if plan.contiguous {
        for chunk in data.chunks_exact_mut(b.numel().max(1)) {
            chunk.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    } else {
        for (v, bi) in data.iter_mut().zip(plan.b_index()) {
            *v += b.data()[bi];
        }
    }
    Ok(Tensor::from_op(data, x.shape().to_vec(), &[x, b], AddBroadcastRule(plan)))
}

struct ReluRule;
impl Backward for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect()
        })]
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_op(data, a.shape().to_vec(), &[a], ReluRule)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Holds tanh(c·(x + a·x³)) from the forward pass.
struct GeluRule(Vec<f64>);
impl Backward for GeluRule {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(x)
                .zip(&self.0)
                .map(|((g, &v), &t)| {
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                })
                .collect()
        })]
    }
}

#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Tensor {
    let t: Vec<f64> = a
        .data()
        .iter()
        .map(|&v| fast_tanh(GELU_C * (v + GELU_A * v * v * v)))
        .collect();
    let data = a.data().iter().zip(&t).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
    Tensor::from_op(data, a.shape().to_vec(), &[a], GeluRule(t))
}

struct LogEpsRule(f64);
impl Backward for LogEpsRule {
    fn name(&self) -> &'static str {
        "log_eps"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { g / (v + self.0) } else { 0.0 })
                .collect()
        })]
    }
}

/// `ln(relu(x) + eps)`.
pub fn log_eps(a: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(GradError::Config {
            op: "log_eps",
            msg: format!("eps must be > 0, got {eps}"),
        });
    }
    let data = a.data().iter().map(|&x| (x.max(0.0) + eps).ln()).collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a], LogEpsRule(eps)))
}

struct ExpClampedRule {
    lo: f64,
    hi: f64,
}
impl Backward for ExpClampedRule {
    fn name(&self) -> &'static str {
        "exp_clamped"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.parents[0].data();
        let y = ctx.out.data();
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(g, (&v, &e))| if v < self.lo || v > self.hi { 0.0 } else { g * e })
                .collect()
        })]
    }
}

/// `exp(clamp(x, lo, hi))`; the clamped region has zero gradient.
pub fn exp_clamped(a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(GradError::Config {
            op: "exp_clamped",
            msg: format!("need lo < hi, got [{lo}, {hi}]"),
        });
    }
    let data = a.data().iter().map(|&x| x.clamp(lo, hi).exp()).collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), &[a], ExpClampedRule { lo, hi }))
}

struct SumRule;
impl Backward for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| vec![ctx.grad[0]; ctx.parents[0].numel()])]
    }
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let s = a.data().iter().sum();
    Tensor::from_op(vec![s], Vec::new(), &[a], SumRule)
}

struct MeanRule;
impl Backward for MeanRule {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let n = ctx.parents[0].numel();
        vec![ctx.needs[0].then(|| vec![ctx.grad[0] / n as f64; n])]
    }
}

/// Mean of all elements, as a rank-0 tensor.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Err(GradError::Contract("mean of empty tensor".into()));
    }
    let m = a.data().iter().sum::<f64>() / a.numel() as f64;
    Ok(Tensor::from_op(vec![m], Vec::new(), &[a], MeanRule))
}
