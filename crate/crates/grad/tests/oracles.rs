//! Primitive ops checked against brute-force oracles and central differences.

use amformer_grad::ops::{self, MASK_VALUE};
use amformer_grad::{grad_check, Parameter, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const H: f64 = 1e-5;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random(r: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn param(name: &str, shape: &[usize], r: &mut Xoshiro256PlusPlus) -> Parameter {
    let n = shape.iter().product();
    Parameter::new(name, shape, random(r, n)).unwrap()
}

/// Triple loop over explicit (i, j, k) indices.
fn naive_matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for k in 0..n {
                c[i * p + j] += a[i * n + k] * b[k * p + j];
            }
        }
    }
    c
}

fn naive_transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = random(&mut r, 12);
    let b = random(&mut r, 8);
    let c = ops::matmul(
        &Tensor::new(a.clone(), &[3, 4]).unwrap(),
        &Tensor::new(b.clone(), &[4, 2]).unwrap(),
    )
    .unwrap();
    let oracle = naive_matmul(&a, &b, 3, 4, 2);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batch_matmul_every_transpose_and_broadcast_matches_oracle() {
    let mut r = rng(12);
    let (bt, m, n, p) = (3, 4, 5, 2);
    for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
        for &(a_batched, b_batched) in &[(true, true), (true, false), (false, true)] {
            let a_mats: Vec<Vec<f64>> = (0..bt).map(|_| random(&mut r, m * n)).collect();
            let b_mats: Vec<Vec<f64>> = (0..bt).map(|_| random(&mut r, n * p)).collect();
            let store_a = |x: &Vec<f64>| if ta { naive_transpose(x, m, n) } else { x.clone() };
            let store_b = |x: &Vec<f64>| if tb { naive_transpose(x, n, p) } else { x.clone() };
            let a_shape = if ta { [n, m] } else { [m, n] };
            let b_shape = if tb { [p, n] } else { [n, p] };
            let a_t = if a_batched {
                let data: Vec<f64> = a_mats.iter().flat_map(store_a).collect();
                Tensor::new(data, &[bt, a_shape[0], a_shape[1]]).unwrap()
            } else {
                Tensor::new(store_a(&a_mats[0]), &a_shape).unwrap()
            };
            let b_t = if b_batched {
                let data: Vec<f64> = b_mats.iter().flat_map(store_b).collect();
                Tensor::new(data, &[bt, b_shape[0], b_shape[1]]).unwrap()
            } else {
                Tensor::new(store_b(&b_mats[0]), &b_shape).unwrap()
            };
            let c = ops::batch_matmul(&a_t, &b_t, ta, tb).unwrap();
            assert_eq!(c.shape(), &[bt, m, p]);
            for bi in 0..bt {
                let am = if a_batched { &a_mats[bi] } else { &a_mats[0] };
                let bm = if b_batched { &b_mats[bi] } else { &b_mats[0] };
                let oracle = naive_matmul(am, bm, m, n, p);
                for (x, y) in c.data()[bi * m * p..(bi + 1) * m * p].iter().zip(&oracle) {
                    assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb} a_b={a_batched} b_b={b_batched}");
                }
            }
        }
    }
}

#[test]
fn batch_matmul_gradients_all_layouts() {
    let mut r = rng(13);
    for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
        for &(a_batched, b_batched) in &[(true, true), (true, false), (false, true), (false, false)] {
            let a_shape: Vec<usize> = {
                let mut s = if ta { vec![3, 2] } else { vec![2, 3] };
                if a_batched {
                    s.insert(0, 2);
                }
                s
            };
            let b_shape: Vec<usize> = {
                let mut s = if tb { vec![4, 3] } else { vec![3, 4] };
                if b_batched {
                    s.insert(0, 2);
                }
                s
            };
            let params = [param("a", &a_shape, &mut r), param("b", &b_shape, &mut r)];
            let weights = random(&mut r, if a_batched || b_batched { 16 } else { 8 });
            let rep = grad_check(&params, H, |t| {
                let c = ops::batch_matmul(&t[0], &t[1], ta, tb)?;
                let w = Tensor::new(weights.clone(), c.shape())?;
                Ok(ops::sum(&ops::mul(&c, &w)?))
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-6, "ta={ta} tb={tb}: {rep:?}");
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut r = rng(14);
    let row = random(&mut r, 7).into_iter().map(|v| v * 5.0).collect::<Vec<_>>();
    let y = ops::softmax_rows(&Tensor::new(row.clone(), &[1, 7]).unwrap()).unwrap();
    let total: f64 = row.iter().map(|v| v.exp()).sum();
    for (got, v) in y.data().iter().zip(&row) {
        assert!((got - v.exp() / total).abs() < 1e-12);
    }
}

#[test]
fn log_eps_gradient_at_three() {
    let eps = 1e-12;
    let x = Parameter::new("x", &[1], vec![3.0]).unwrap();
    let rep = grad_check(&[x], H, |t| Ok(ops::sum(&ops::log_eps(&t[0], eps)?))).unwrap();
    assert!((rep.analytic - 1.0 / (3.0 + eps)).abs() < 1e-15);
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

/// Loss `Σ c ⊙ f(x)` with random `c`, so every output element matters.
fn weighted<F>(shape: &[usize], seed: u64, f: F) -> f64
where
    F: Fn(&Tensor) -> amformer_grad::Result<Tensor>,
{
    let mut r = rng(seed);
    let x = param("x", shape, &mut r);
    let probe = f(&x.constant()).unwrap();
    let c = random(&mut r, probe.numel());
    let cs = probe.shape().to_vec();
    grad_check(&[x], H, |t| {
        let y = f(&t[0])?;
        Ok(ops::sum(&ops::mul(&y, &Tensor::new(c.clone(), &cs)?)?))
    })
    .unwrap()
    .max_rel_err
}

#[test]
fn elementwise_primitives_pass_gradcheck() {
    let cases: Vec<(&str, f64)> = vec![
        ("scale", weighted(&[3, 4], 1, |x| Ok(ops::scale(x, -2.5)))),
        ("gelu", weighted(&[3, 4], 2, |x| Ok(ops::gelu(x)))),
        ("relu", weighted(&[3, 4], 3, |x| Ok(ops::relu(x)))),
        ("exp_clamped", weighted(&[3, 4], 4, |x| ops::exp_clamped(x, -30.0, 30.0))),
        ("log_eps", weighted(&[3, 4], 5, |x| ops::log_eps(&ops::add_broadcast(x, &Tensor::new(vec![1.5; 4], &[4])?)?, 1e-12))),
        ("softmax_rows", weighted(&[3, 4], 6, ops::softmax_rows)),
        ("topk+softmax", weighted(&[3, 5], 7, |x| ops::softmax_rows(&ops::topk_mask(x, 2)?))),
        ("transpose", weighted(&[2, 3, 4], 8, ops::transpose)),
        ("mean_rows", weighted(&[2, 3, 4], 9, ops::mean_rows)),
        ("split_heads", weighted(&[2, 3, 4], 10, |x| ops::split_heads(x, 2))),
        ("reshape", weighted(&[2, 3, 4], 11, |x| ops::reshape(x, &[6, 4]))),
        ("repeat_batch", weighted(&[3, 4], 12, |x| Ok(ops::repeat_batch(x, 3)))),
        ("mul_self", weighted(&[3, 4], 13, |x| ops::mul(x, x))),
        ("sub", weighted(&[3, 4], 14, |x| ops::sub(x, &ops::scale(x, 0.3)))),
        ("mean", weighted(&[3, 4], 15, ops::mean)),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn linear_gradients_on_4x3_input() {
    let mut r = rng(20);
    let params = [
        param("x", &[4, 3], &mut r),
        param("w", &[3, 5], &mut r),
        param("b", &[5], &mut r),
    ];
    let c = random(&mut r, 20);
    let rep = grad_check(&params, H, |t| {
        let y = ops::linear(&t[0], &t[1], Some(&t[2]))?;
        Ok(ops::sum(&ops::mul(&y, &Tensor::new(c.clone(), &[4, 5])?)?))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn vconcat_and_layer_norm_gradients() {
    let mut r = rng(21);
    let params = [
        param("a", &[2, 2, 4], &mut r),
        param("b", &[2, 1, 4], &mut r),
        param("gamma", &[4], &mut r),
        param("beta", &[4], &mut r),
    ];
    let c = random(&mut r, 24);
    let rep = grad_check(&params, H, |t| {
        let y = ops::layer_norm(&ops::vconcat(&t[0], &t[1])?, &t[2], &t[3])?;
        Ok(ops::sum(&ops::mul(&y, &Tensor::new(c.clone(), &[2, 3, 4])?)?))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn softmax_cross_entropy_toy() {
    let mut r = rng(22);
    let params = [param("w", &[3, 4], &mut r), param("x", &[5, 3], &mut r)];
    let targets = [0usize, 3, 1, 1, 2];
    let rep = grad_check(&params, H, |t| {
        let logits = ops::matmul(&t[1], &t[0])?;
        ops::cross_entropy(&logits, &targets)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn mse_embedding_gather_gradients() {
    let mut r = rng(23);
    let params = [
        param("w", &[3, 2], &mut r),
        param("b", &[3, 2], &mut r),
        param("table", &[4, 2], &mut r),
    ];
    let values = Tensor::new(random(&mut r, 6), &[2, 3]).unwrap();
    let rep = grad_check(&params, H, |t| {
        let e = ops::reshape(&ops::numeric_embed(&values, &t[0], &t[1])?, &[6, 2])?;
        let g = ops::gather_rows(&t[2], &[0, 3, 3, 1, 2, 0])?;
        let pred = ops::mean_rows(&ops::reshape(&ops::mul(&e, &g)?, &[6, 1, 2])?)?;
        ops::mse_loss(&pred, &[0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.2, 0.1, 0.0, 0.0, 0.3])
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 6), 1..8),
        k in 1usize..8,
    ) {
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let s = Tensor::new(data, &[n, 6]).unwrap();
        let masked = ops::topk_mask(&s, k).unwrap();
        let kept = masked.data().chunks(6).map(|r| r.iter().filter(|&&v| v > MASK_VALUE).count());
        for c in kept {
            prop_assert_eq!(c, k.min(6));
        }
        let w = ops::softmax_rows(&masked).unwrap();
        for row in w.data().chunks(6) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().filter(|&&v| v > 1e-12).count() <= k);
        }
    }

    #[test]
    fn exp_inverts_log_eps(x in 1e-6f64..1e6) {
        let eps = 1e-12;
        let t = Tensor::new(vec![x], &[1]).unwrap();
        let y = ops::exp_clamped(&ops::log_eps(&t, eps).unwrap(), -30.0, 30.0).unwrap();
        prop_assert!(((y.data()[0] - (x + eps)) / (x + eps)).abs() < 1e-9);
    }

    #[test]
    fn transpose_twice_is_identity(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut g = rng(seed);
        let t = Tensor::new(random(&mut g, r * c), &[r, c]).unwrap();
        let back = ops::transpose(&ops::transpose(&t).unwrap()).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }
}
