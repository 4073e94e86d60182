use amformer::rng::seeded;
use amformer::synth::{
    assign_classes, generate, make_minority, response, sample_spec, split_train_test, subsample_fraction, SynthSpec,
};
use proptest::prelude::*;
use rand::Rng;

fn brute_response(x: &[f64], spec: &SynthSpec) -> f64 {
    let mut r = 0.0;
    for i in 0..spec.n_terms {
        let mut term = spec.alpha[i];
        for j in 0..spec.n_features {
            for _ in 0..spec.beta[i][j] {
                term *= x[j];
            }
        }
        r += term;
    }
    r
}

proptest! {
    #[test]
    fn response_matches_repeated_multiplication(seed in any::<u64>(), nf in 1usize..10, nt in 1usize..8) {
        let spec = sample_spec(nf, nt, 2, 10, seed).unwrap();
        let mut rng = seeded(seed ^ 1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..nf).map(|_| rng.random_range(0.5..2.0)).collect();
            let (got, want) = (response(&x, &spec).unwrap(), brute_response(&x, &spec));
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn classes_are_balanced_and_ordered(values in prop::collection::vec(-1e3f64..1e3, 2..400), c in 2usize..40) {
        prop_assume!(c <= values.len());
        let labels = assign_classes(&values, c).unwrap();
        let mut counts = vec![0usize; c];
        labels.iter().for_each(|&l| counts[l] += 1);
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(labels[i] <= labels[j]);
                }
            }
        }
    }

    #[test]
    fn split_is_a_stratified_partition(seed in any::<u64>(), frac in 0.2f64..0.9) {
        let table = generate(&sample_spec(4, 3, 5, 300, seed).unwrap()).unwrap();
        let (tr, te) = split_train_test(&table, frac, seed).unwrap();
        let mut ids: Vec<usize> = tr.ids.iter().chain(&te.ids).copied().collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..300).collect::<Vec<_>>());
        let (all, kept) = (table.class_counts(), tr.class_counts());
        for (a, k) in all.iter().zip(&kept) {
            let want = ((frac * *a as f64).round() as usize).clamp(1, a - 1);
            prop_assert_eq!(*k, want);
        }
    }
}

#[test]
fn generation_repeats_per_seed_and_stays_in_range() {
    let spec = sample_spec(6, 4, 10, 2000, 9).unwrap();
    let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
    assert_eq!(a, b);
    assert!(a.features.iter().all(|v| (0.5..=2.0).contains(v)));
    assert_ne!(generate(&sample_spec(6, 4, 10, 2000, 10).unwrap()).unwrap().features, a.features);
    for i in 0..a.len() {
        assert_eq!(a.responses[i], response(a.row(i), &spec).unwrap());
    }
}

#[test]
fn log_uniform_inputs_have_symmetric_logs() {
    let t = generate(&sample_spec(8, 2, 2, 20_000, 4).unwrap()).unwrap();
    let mean_log = t.features.iter().map(|v| v.ln()).sum::<f64>() / t.features.len() as f64;
    // ln 0.5 and ln 2 are symmetric about zero
    assert!(mean_log.abs() < 0.01, "{mean_log}");
}

#[test]
fn fractions_shrink_the_right_classes() {
    let table = generate(&sample_spec(4, 3, 8, 1600, 2).unwrap()).unwrap();
    let half = subsample_fraction(&table, 0.5, 1).unwrap();
    for (a, h) in table.class_counts().iter().zip(half.class_counts()) {
        assert_eq!(h, (0.5 * *a as f64).round() as usize);
    }
    assert_eq!(subsample_fraction(&table, 1.0, 1).unwrap(), table);
    let (minor, ids) = make_minority(&table, 0.1, 1).unwrap();
    assert_eq!(ids, vec![4, 5, 6, 7]);
    for (c, (a, m)) in table.class_counts().iter().zip(minor.class_counts()).enumerate() {
        let want = if c >= 4 { (0.1 * *a as f64).round() as usize } else { *a };
        assert_eq!(m, want, "class {c}");
    }
    assert!(subsample_fraction(&table, 0.0, 1).is_err());
    assert!(make_minority(&table, 1e-6, 1).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(sample_spec(0, 3, 2, 10, 0).is_err());
    assert!(sample_spec(3, 3, 1, 10, 0).is_err());
    assert!(sample_spec(3, 3, 20, 10, 0).is_err());
    let mut spec = sample_spec(3, 2, 2, 10, 0).unwrap();
    spec.beta[0][0] = 9;
    assert!(generate(&spec).is_err());
    assert!(response(&[1.0, -1.0, 1.0], &sample_spec(3, 2, 2, 10, 0).unwrap()).is_err());
}
