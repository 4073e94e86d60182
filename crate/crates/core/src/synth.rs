//! Synthetic arithmetic benchmark.
//!
//! Each response is a sparse sum of monomials,
//! `r = Σᵢ αᵢ · Πⱼ xⱼ^βᵢⱼ`, with inputs drawn log-uniformly from
//! `[x_low, x_high]`. Responses are ranked and cut into `C` classes of equal
//! size (±1), which gives a classification task whose difficulty grows with `C`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream};
use crate::tabular::{Dataset, FeatureSchema, Labels, TaskKind};

pub const MAX_EXPONENT: u32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_features: usize,
    pub n_terms: usize,
    pub alpha: Vec<f64>,
    /// `n_terms` rows of `n_features` exponents.
    pub beta: Vec<Vec<u32>>,
    pub classes: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub x_low: f64,
    pub x_high: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_terms == 0 || self.n_features == 0 {
            return bad("need at least one term and one feature".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > self.n_samples {
            return bad(format!(
                "{} classes cannot be filled from {} samples",
                self.classes, self.n_samples
            ));
        }
        if !(self.x_low > 0.0 && self.x_low < self.x_high && self.x_high.is_finite()) {
            return bad(format!("need 0 < x_low < x_high, got [{}, {}]", self.x_low, self.x_high));
        }
        if self.alpha.len() != self.n_terms || self.beta.len() != self.n_terms {
            return bad("alpha and beta must have one entry per term".into());
        }
        if self.alpha.iter().any(|a| !(*a > -1.0 && *a < 1.0)) {
            return bad("alpha entries must lie in (-1, 1)".into());
        }
        for row in &self.beta {
            if row.len() != self.n_features || row.iter().any(|&b| b > MAX_EXPONENT) {
                return bad(format!(
                    "each beta row needs {} exponents in 0..={MAX_EXPONENT}",
                    self.n_features
                ));
            }
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.n_features).map(|j| format!("x{j}")).collect()
    }
}

/// Draws α and β from `seed`: all of α first, then β row by row.
pub fn sample_spec(n_features: usize, n_terms: usize, classes: usize, n_samples: usize, seed: u64) -> Result<SynthSpec> {
    let mut rng = seeded(seed);
    let alpha = (0..n_terms)
        .map(|_| loop {
            let a = rng.random_range(-1.0..1.0);
            if a > -1.0 {
                break a;
            }
        })
        .collect();
    let beta = (0..n_terms)
        .map(|_| {
            (0..n_features)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(1..=MAX_EXPONENT)
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let spec = SynthSpec {
        n_features,
        n_terms,
        alpha,
        beta,
        classes,
        n_samples,
        seed,
        x_low: 0.5,
        x_high: 2.0,
    };
    spec.validate()?;
    Ok(spec)
}

fn eval(x: &[f64], spec: &SynthSpec) -> f64 {
    spec.alpha
        .iter()
        .zip(&spec.beta)
        .map(|(a, row)| a * x.iter().zip(row).map(|(&v, &b)| v.powi(b as i32)).product::<f64>())
        .sum()
}

pub fn response(x: &[f64], spec: &SynthSpec) -> Result<f64> {
    if x.len() != spec.n_features {
        return Err(Error::Data(format!("expected {} features, got {}", spec.n_features, x.len())));
    }
    if let Some(v) = x.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Data(format!("features must be strictly positive, got {v}")));
    }
    Ok(eval(x, spec))
}

/// Generated rows with their responses and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTable {
    /// Row-major `len × n_features`.
    pub features: Vec<f64>,
    pub responses: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row numbers in the originally generated table.
    pub ids: Vec<usize>,
    pub spec: Arc<SynthSpec>,
}

impl LabeledTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.spec.n_features;
        &self.features[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.spec.classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    pub fn select(&self, rows: &[usize]) -> LabeledTable {
        LabeledTable {
            features: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            responses: rows.iter().map(|&r| self.responses[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            spec: Arc::clone(&self.spec),
        }
    }

    /// Classification dataset: features `x1..xn`, label column `class`.
    pub fn to_dataset(&self) -> Dataset {
        let c = self.spec.classes;
        let task = if c == 2 {
            TaskKind::Binary
        } else {
            TaskKind::Multiclass { classes: c }
        };
        let schema = FeatureSchema::numeric(self.spec.feature_names(), "class", task);
        Dataset::new(schema, self.features.clone(), Vec::new(), Labels::Classes(self.labels.clone()))
            .expect("generated tables are well-formed")
    }

    /// Regression dataset on the raw response.
    pub fn to_regression_dataset(&self) -> Dataset {
        let schema = FeatureSchema::numeric(self.spec.feature_names(), "r", TaskKind::Regression);
        Dataset::new(schema, self.features.clone(), Vec::new(), Labels::Values(self.responses.clone()))
            .expect("generated tables are well-formed")
    }
}

pub fn generate(spec: &SynthSpec) -> Result<LabeledTable> {
    spec.validate()?;
    let mut rng = seeded(derive_seed(spec.seed, &[stream::SYNTH_DATA]));
    let (lo, hi) = (spec.x_low.ln(), spec.x_high.ln());
    let n = spec.n_samples * spec.n_features;
    let features: Vec<f64> = (0..n)
        .map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp().clamp(spec.x_low, spec.x_high))
        .collect();
    let responses: Vec<f64> = features.chunks_exact(spec.n_features).map(|x| eval(x, spec)).collect();
    let labels = assign_classes(&responses, spec.classes)?;
    Ok(LabeledTable {
        features,
        responses,
        labels,
        ids: (0..spec.n_samples).collect(),
        spec: Arc::new(spec.clone()),
    })
}

/// Rank-bins `responses` into `classes` contiguous groups; bin `b` starts at rank `⌊b·n/C⌋`.
pub fn assign_classes(responses: &[f64], classes: usize) -> Result<Vec<usize>> {
    let n = responses.len();
    if classes == 0 || classes > n {
        return Err(Error::Config(format!("cannot bin {n} responses into {classes} classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| responses[a].total_cmp(&responses[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for b in 0..classes {
        for &i in &order[b * n / classes..(b + 1) * n / classes] {
            labels[i] = b;
        }
    }
    Ok(labels)
}

fn rows_by_class(t: &LabeledTable) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); t.spec.classes];
    t.labels.iter().enumerate().for_each(|(i, &l)| by[l].push(i));
    by
}

fn check_fraction(name: &str, f: f64, inclusive_one: bool) -> Result<()> {
    let ok = f > 0.0 && if inclusive_one { f <= 1.0 } else { f < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1{}, got {f}", if inclusive_one { "]" } else { ")" })))
    }
}

/// Stratified split: every class keeps `round(frac·count)` rows for training
/// (at least one on each side). Both halves list rows in original order.
pub fn split_train_test(table: &LabeledTable, train_frac: f64, seed: u64) -> Result<(LabeledTable, LabeledTable)> {
    check_fraction("train_frac", train_frac, false)?;
    let mut rng = seeded(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut rows) in rows_by_class(table).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::Data(format!("class {class} has {} sample(s); cannot stratify", rows.len())));
        }
        rows.shuffle(&mut rng);
        let keep = ((train_frac * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..keep]);
        test.extend_from_slice(&rows[keep..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((table.select(&train), table.select(&test)))
}

fn reduce_classes(table: &LabeledTable, f: f64, seed: u64, reduce: impl Fn(usize) -> bool) -> Result<LabeledTable> {
    let mut rng = seeded(seed);
    let mut kept = Vec::new();
    for (class, mut rows) in rows_by_class(table).into_iter().enumerate() {
        if !reduce(class) || rows.is_empty() {
            kept.extend(rows);
            continue;
        }
        rows.shuffle(&mut rng);
        let keep = (f * rows.len() as f64).round() as usize;
        if keep == 0 {
            return Err(Error::Config(format!(
                "fraction {f} empties class {class} ({} rows)",
                rows.len()
            )));
        }
        kept.extend_from_slice(&rows[..keep]);
    }
    kept.sort_unstable();
    Ok(table.select(&kept))
}

/// Keeps `round(f1·count)` rows of every class.
pub fn subsample_fraction(train: &LabeledTable, f1: f64, seed: u64) -> Result<LabeledTable> {
    check_fraction("f1", f1, true)?;
    reduce_classes(train, f1, seed, |_| true)
}

/// Classes `⌊C/2⌋..C` become minorities holding `round(f2·count)` rows.
/// Returns the reduced table and the minority class ids.
pub fn make_minority(train: &LabeledTable, f2: f64, seed: u64) -> Result<(LabeledTable, Vec<usize>)> {
    check_fraction("f2", f2, true)?;
    let c = train.spec.classes;
    let out = reduce_classes(train, f2, seed, |class| class >= c / 2)?;
    Ok((out, (c / 2..c).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alpha: Vec<f64>, beta: Vec<Vec<u32>>, classes: usize, n: usize) -> SynthSpec {
        SynthSpec {
            n_features: beta[0].len(),
            n_terms: alpha.len(),
            alpha,
            beta,
            classes,
            n_samples: n,
            seed: 0,
            x_low: 0.5,
            x_high: 2.0,
        }
    }

    fn table_with_labels(labels: Vec<usize>, classes: usize) -> LabeledTable {
        let n = labels.len();
        LabeledTable {
            features: (0..n).map(|i| 1.0 + i as f64 / n as f64).collect(),
            responses: vec![0.0; n],
            labels,
            ids: (0..n).collect(),
            spec: Arc::new(spec(vec![0.5], vec![vec![1]], classes, n)),
        }
    }

    #[test]
    fn response_forced_arithmetic() {
        // Validation keeps α in (−1, 1); response() itself evaluates any spec.
        let s = spec(vec![2.0], vec![vec![1, 2, 0, 0]], 2, 4);
        assert_eq!(response(&[3.0, 2.0, 1.0, 1.0], &s).unwrap(), 24.0);
        let z = spec(vec![0.25, -0.5], vec![vec![0, 0], vec![0, 0]], 2, 4);
        assert_eq!(response(&[1.7, 0.6], &z).unwrap(), -0.25);
        assert!(response(&[0.0, 1.0], &z).is_err());
    }

    #[test]
    fn sample_spec_is_deterministic_and_valid() {
        let a = sample_spec(8, 5, 4, 100, 11).unwrap();
        assert_eq!(a, sample_spec(8, 5, 4, 100, 11).unwrap());
        assert_ne!(a, sample_spec(8, 5, 4, 100, 12).unwrap());
        assert!(sample_spec(8, 5, 101, 100, 11).is_err());
    }

    #[test]
    fn assign_classes_examples() {
        assert_eq!(assign_classes(&[0.1, 0.5, 0.2, 0.9], 2).unwrap(), vec![0, 1, 0, 1]);
        let mut l = assign_classes(&[3.0, 1.0, 2.0, 0.0, 5.0], 5).unwrap();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
        // equal responses resolve by index
        assert_eq!(assign_classes(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![0, 0, 1, 1]);
        assert!(assign_classes(&[1.0], 2).is_err());
    }

    #[test]
    fn split_ten_rows_two_classes() {
        let t = table_with_labels(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2);
        let (tr, te) = split_train_test(&t, 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(tr.class_counts(), vec![4, 4]);
        assert_eq!(te.class_counts(), vec![1, 1]);
        let mut all: Vec<usize> = tr.ids.iter().chain(&te.ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_train_test(&t, 0.8, 5).unwrap().0, tr);
        assert!(split_train_test(&t, 1.0, 5).is_err());
    }

    #[test]
    fn split_rejects_singleton_class() {
        let t = table_with_labels(vec![0, 0, 0, 1], 2);
        assert!(split_train_test(&t, 0.5, 1).is_err());
    }

    #[test]
    fn subsample_and_minority_counts() {
        let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        let t = table_with_labels(labels, 4);
        assert_eq!(subsample_fraction(&t, 1.0, 3).unwrap(), t);
        assert_eq!(subsample_fraction(&t, 0.5, 3).unwrap().class_counts(), vec![4, 4, 4, 4]);
        let (m, minority) = make_minority(&t, 0.5, 3).unwrap();
        assert_eq!(minority, vec![2, 3]);
        assert_eq!(m.class_counts(), vec![8, 8, 4, 4]);
        assert!(subsample_fraction(&t, 0.01, 3).is_err());
    }
}
