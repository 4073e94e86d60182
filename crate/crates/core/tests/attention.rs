use amformer::model::{additive_stream, attention_weights, multiplicative_stream, AttnShape, Projections, Query};
use amformer::rng::seeded;
use amformer_grad::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn permute_rows(x: &[f64], perm: &[usize], d: usize) -> Vec<f64> {
    perm.iter().flat_map(|&p| x[p * d..(p + 1) * d].iter().copied()).collect()
}

struct Case {
    x: Vec<f64>,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    prompts: Tensor,
    n: usize,
    d: usize,
    heads: usize,
    k: usize,
}

fn case(seed: u64) -> Case {
    let mut rng = seeded(seed);
    let (n, heads) = (rng.random_range(2..9), rng.random_range(1..3));
    let d = heads * 2;
    let t = |rng: &mut _, s: &[usize]| Tensor::new(random(rng, s.iter().product()), s).unwrap();
    Case {
        x: random(&mut rng, n * d),
        wq: t(&mut rng, &[d, d]),
        wk: t(&mut rng, &[d, d]),
        wv: t(&mut rng, &[d, d]),
        prompts: t(&mut rng, &[3, d]),
        n,
        d,
        heads,
        k: rng.random_range(1..=n),
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10 * y.abs().max(1.0))
}

proptest! {
    #[test]
    fn projected_queries_are_permutation_equivariant(seed in any::<u64>()) {
        let c = case(seed);
        let mut perm: Vec<usize> = (0..c.n).collect();
        perm.shuffle(&mut seeded(seed ^ 7));
        let x = Tensor::new(c.x.clone(), &[1, c.n, c.d]).unwrap();
        let xp = Tensor::new(permute_rows(&c.x, &perm, c.d), &[1, c.n, c.d]).unwrap();
        let proj = Projections { query: Query::Project(&c.wq), wk: &c.wk, wv: &c.wv };
        let shape = AttnShape { heads: c.heads, k: c.k };
        let a = additive_stream(&x, &proj, shape, None).unwrap();
        let ap = additive_stream(&xp, &proj, shape, None).unwrap();
        prop_assert!(close(ap.data(), &permute_rows(a.data(), &perm, c.d)));
        // strictly positive inputs: ReLU would otherwise map distinct tokens to tied scores
        let pos: Vec<f64> = c.x.iter().map(|v| v.abs() + 0.1).collect();
        let x = Tensor::new(pos.clone(), &[1, c.n, c.d]).unwrap();
        let xp = Tensor::new(permute_rows(&pos, &perm, c.d), &[1, c.n, c.d]).unwrap();
        let m = multiplicative_stream(&x, &proj, shape, 1.0, (-30.0, 30.0), None).unwrap();
        let mp = multiplicative_stream(&xp, &proj, shape, 1.0, (-30.0, 30.0), None).unwrap();
        prop_assert!(close(mp.data(), &permute_rows(m.data(), &perm, c.d)));
    }

    #[test]
    fn prompt_queries_are_permutation_invariant(seed in any::<u64>()) {
        let c = case(seed);
        let mut perm: Vec<usize> = (0..c.n).collect();
        perm.shuffle(&mut seeded(seed ^ 9));
        let x = Tensor::new(c.x.clone(), &[1, c.n, c.d]).unwrap();
        let xp = Tensor::new(permute_rows(&c.x, &perm, c.d), &[1, c.n, c.d]).unwrap();
        let proj = Projections { query: Query::Prompt(&c.prompts), wk: &c.wk, wv: &c.wv };
        let shape = AttnShape { heads: c.heads, k: c.k };
        let a = additive_stream(&x, &proj, shape, None).unwrap();
        prop_assert_eq!(a.shape(), &[1, 3, c.d]);
        prop_assert!(close(additive_stream(&xp, &proj, shape, None).unwrap().data(), a.data()));
    }

    #[test]
    fn weights_are_sparse_distributions(seed in any::<u64>()) {
        let c = case(seed);
        let x = Tensor::new(c.x.clone(), &[1, c.n, c.d]).unwrap();
        let proj = Projections { query: Query::Project(&c.wq), wk: &c.wk, wv: &c.wv };
        let w = attention_weights(&x, &proj, AttnShape { heads: c.heads, k: c.k }).unwrap();
        prop_assert_eq!(w.shape(), &[c.heads, c.n, c.n]);
        for row in w.data().chunks(c.n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row.iter().filter(|&&v| v > 1e-12).count() <= c.k);
        }
    }
}
