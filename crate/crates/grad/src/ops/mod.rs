//! Differentiable operations. Every function records a backward rule when any
//! input requires gradient.

mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use elementwise::{
    add, add_broadcast, exp_clamped, gelu, log_eps, mean, mul, mul_const, relu, scale, sub, sum,
};
pub use linalg::{batch_matmul, linear, matmul, transpose};
pub use nn::{
    cross_entropy, layer_norm, mse_loss, numeric_embed, softmax_rows, topk_mask, LAYER_NORM_EPS,
    MASK_VALUE,
};
pub use shape::{gather_rows, merge_heads, mean_rows, repeat_batch, reshape, split_heads, vconcat};
