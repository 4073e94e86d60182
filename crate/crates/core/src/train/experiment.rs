//! Synthetic-benchmark experiments: fine-grained classes, data efficiency,
//! minority-class generalization and the stream/prompt ablation grid.
//!
//! Every (model, C, f1, f2, repetition) cell derives its seeds from the base
//! seed and the repetition index alone, so models compared within a repetition
//! see the same data, split and initial parameters, and a cell's result does
//! not depend on which other cells run or how many run in parallel.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::TrainConfig;
use super::trainer::{predict_classes, train, TrainReport};
use super::metrics::accuracy;
use crate::error::{Error, Result};
use crate::model::{toggle_name, AmformerConfig, InputSpec, Model, ABLATION_GRID};
use crate::rng::{derive_seed, stream};
use crate::synth::{generate, make_minority, sample_spec, split_train_test, subsample_fraction};
use crate::tabular::{apply_normalizer, fit_normalizer, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Finegrained,
    DataEfficiency,
    Generalization,
    Ablation,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Finegrained,
        Experiment::DataEfficiency,
        Experiment::Generalization,
        Experiment::Ablation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Finegrained => "finegrained",
            Experiment::DataEfficiency => "data-efficiency",
            Experiment::Generalization => "generalization",
            Experiment::Ablation => "ablation",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Which architecture a cell trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    /// The configured model as given.
    Amformer,
    /// Additive stream only, dense attention, no prompts.
    Transformer,
    /// The configured model with stream and prompt toggles overridden.
    Variant {
        additive: bool,
        multiplicative: bool,
        prompts: bool,
    },
}

impl ModelKind {
    /// The six (additive, multiplicative, prompts) rows of the ablation grid.
    pub fn ablation_grid() -> Vec<ModelKind> {
        ABLATION_GRID
            .into_iter()
        .map(|(additive, multiplicative, prompts)| ModelKind::Variant {
            additive,
            multiplicative,
            prompts,
        })
        .collect()
    }

    pub fn config(&self, base: &AmformerConfig, n_tokens: usize) -> AmformerConfig {
        match *self {
            ModelKind::Amformer => base.clone(),
            ModelKind::Transformer => base.plain_transformer(n_tokens),
            ModelKind::Variant {
                additive,
                multiplicative,
                prompts,
            } => AmformerConfig {
                use_additive: additive,
                use_multiplicative: multiplicative,
                use_prompts: prompts,
                ..base.clone()
            },
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModelKind::Amformer => f.write_str("amformer"),
            ModelKind::Transformer => f.write_str("transformer"),
            ModelKind::Variant {
                additive,
                multiplicative,
                prompts,
            } => f.write_str(&toggle_name(additive, multiplicative, prompts)),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amformer" => return Ok(ModelKind::Amformer),
            "transformer" => return Ok(ModelKind::Transformer),
            _ => {}
        }
        let bit = |part: Option<&str>, prefix: &str| match part.and_then(|p| p.strip_prefix(prefix)) {
            Some("0") => Some(false),
            Some("1") => Some(true),
            _ => None,
        };
        let mut parts = s.split('_');
        match (bit(parts.next(), "add"), bit(parts.next(), "mul"), bit(parts.next(), "prompt"), parts.next()) {
            (Some(additive), Some(multiplicative), Some(prompts), None) => Ok(ModelKind::Variant {
                additive,
                multiplicative,
                prompts,
            }),
            _ => Err(Error::Config(format!(
                "unknown model `{s}` (expected amformer, transformer or addX_mulY_promptZ)"
            ))),
        }
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(m: ModelKind) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub repetitions: usize,
    pub n_features: usize,
    pub n_terms: usize,
    pub n_samples: usize,
    pub train_frac: f64,
    /// Class counts swept by the fine-grained experiment.
    pub classes: Vec<usize>,
    /// Class count of the data-efficiency, generalization and ablation experiments.
    pub fixed_classes: usize,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub models: Vec<ModelKind>,
    pub model: AmformerConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 20k samples, 3 repetitions, desk model and schedule.
    pub fn desk() -> Self {
        Self {
            base_seed: 2024,
            repetitions: 3,
            n_features: 8,
            n_terms: 5,
            n_samples: 20_000,
            train_frac: 0.8,
            classes: vec![4, 16, 64],
            fixed_classes: 64,
            f1: vec![0.2, 0.5, 1.0],
            f2: vec![0.1, 0.5],
            models: vec![ModelKind::Amformer, ModelKind::Transformer],
            model: AmformerConfig::desk(TaskKind::Multiclass { classes: 2 }),
            train: TrainConfig {
                eval_every: 0,
                ..TrainConfig::desk()
            },
        }
    }

    /// 200k samples with the published model, C = 128 for the fixed-class studies.
    pub fn paper() -> Self {
        Self {
            n_samples: 200_000,
            classes: vec![4, 8, 16, 32, 64, 128, 256, 512],
            fixed_classes: 128,
            model: AmformerConfig::paper(TaskKind::Multiclass { classes: 2 }),
            train: TrainConfig {
                eval_every: 0,
                ..TrainConfig::paper()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("models must not be empty".into()));
        }
        for &c in self.classes.iter().chain([&self.fixed_classes]) {
            if c < 2 || c > self.n_samples {
                return Err(Error::Config(format!("class count {c} outside [2, {}]", self.n_samples)));
            }
        }
        for &f in self.f1.iter().chain(&self.f2) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("fractions must lie in (0, 1], got {f}")));
            }
        }
        self.train.validate()?;
        for m in &self.models {
            m.config(&self.model, self.n_features).validate()?;
        }
        Ok(())
    }

    /// Root seed of repetition `rep`.
    pub fn repetition_seed(&self, rep: usize) -> u64 {
        derive_seed(self.base_seed, &[stream::REPEAT, rep as u64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub experiment: Experiment,
    pub model: ModelKind,
    pub classes: usize,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub rep: usize,
}

/// Identity of the computation behind a cell. Cells with equal keys produce
/// identical outcomes: a fraction of 1 is the identity subsample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellKey {
    model: ModelKind,
    classes: usize,
    f1_bits: Option<u64>,
    f2_bits: Option<u64>,
    rep: usize,
}

impl Cell {
    pub fn key(&self) -> CellKey {
        let bits = |f: Option<f64>| f.filter(|&v| v != 1.0).map(f64::to_bits);
        CellKey {
            model: self.model,
            classes: self.classes,
            f1_bits: bits(self.f1),
            f2_bits: bits(self.f2),
            rep: self.rep,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub test_acc: f64,
    /// Test accuracy restricted to minority classes (generalization cells).
    pub minority_acc: Option<f64>,
    pub train_rows: usize,
    pub seed: u64,
    pub report: TrainReport,
}

pub fn cells(experiment: Experiment, cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    let mut push = |model, classes, f1, f2| {
        for rep in 0..cfg.repetitions {
            out.push(Cell {
                experiment,
                model,
                classes,
                f1,
                f2,
                rep,
            });
        }
    };
    match experiment {
        Experiment::Finegrained => {
            for &c in &cfg.classes {
                cfg.models.iter().for_each(|&m| push(m, c, None, None));
            }
        }
        Experiment::DataEfficiency => {
            for &f in &cfg.f1 {
                cfg.models.iter().for_each(|&m| push(m, cfg.fixed_classes, Some(f), None));
            }
        }
        Experiment::Generalization => {
            for &f in &cfg.f2 {
                cfg.models.iter().for_each(|&m| push(m, cfg.fixed_classes, None, Some(f)));
            }
        }
        Experiment::Ablation => {
            for m in ModelKind::ablation_grid() {
                push(m, cfg.fixed_classes, None, None);
            }
        }
    }
    out
}

pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutcome> {
    let seed = cfg.repetition_seed(cell.rep);
    let spec = sample_spec(
        cfg.n_features,
        cfg.n_terms,
        cell.classes,
        cfg.n_samples,
        derive_seed(seed, &[stream::SYNTH_DATA]),
    )?;
    let table = generate(&spec)?;
    let (mut tr, te) = split_train_test(&table, cfg.train_frac, derive_seed(seed, &[stream::SPLIT]))?;
    let sub_seed = derive_seed(seed, &[stream::SUBSAMPLE]);
    let mut minority = Vec::new();
    if let Some(f1) = cell.f1 {
        tr = subsample_fraction(&tr, f1, sub_seed)?;
    }
    if let Some(f2) = cell.f2 {
        (tr, minority) = make_minority(&tr, f2, sub_seed)?;
    }
    let (train_raw, test_raw) = (tr.to_dataset(), te.to_dataset());
    let stats = fit_normalizer(&train_raw);
    let train_ds = apply_normalizer(&train_raw, &stats)?;
    let test_ds = apply_normalizer(&test_raw, &stats)?;

    let mcfg = AmformerConfig {
        task: train_ds.schema.task,
        ..cell.model.config(&cfg.model, cfg.n_features)
    };
    let mut model = Model::new(mcfg, InputSpec::numeric(cfg.n_features), derive_seed(seed, &[stream::MODEL_INIT]))?;
    let tcfg = TrainConfig {
        seed: derive_seed(seed, &[stream::SHUFFLE]),
        ..cfg.train.clone()
    };
    let id = format!("{}/{}/C{}/rep{}", cell.experiment.name(), cell.model, cell.classes, cell.rep);
    let report = train(&mut model, &train_ds, None, &tcfg, &id)?;
    let pred = predict_classes(&model, &test_ds, 1024)?;
    let labels = &te.labels;
    let test_acc = accuracy(&pred, labels)?;
    let minority_acc = if cell.f2.is_some() {
        let (p, l): (Vec<usize>, Vec<usize>) = pred
            .iter()
            .zip(labels)
            .filter(|(_, l)| minority.contains(l))
            .map(|(&p, &l)| (p, l))
            .unzip();
        Some(accuracy(&p, &l)?)
    } else {
        None
    };
    log::info!("{id}: test acc {test_acc:.4} minority {minority_acc:?} ({:.1}s)", report.wall_clock_s);
    Ok(CellOutcome {
        test_acc,
        minority_acc,
        train_rows: tr.len(),
        seed,
        report,
    })
}

/// Outcomes already computed, keyed by [`Cell::key`].
pub type CellCache = HashMap<CellKey, CellOutcome>;

/// Runs every cell not already in `cache` on `jobs` threads; outcomes come back
/// in cell order whatever the parallelism.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[Cell], jobs: usize, cache: &mut CellCache) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let mut todo: Vec<Cell> = Vec::new();
    for c in cells {
        if !cache.contains_key(&c.key()) && !todo.iter().any(|t| t.key() == c.key()) {
            todo.push(*c);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let done: Vec<Result<CellOutcome>> = pool.install(|| todo.par_iter().map(|c| run_cell(cfg, c)).collect());
    for (c, r) in todo.iter().zip(done) {
        cache.insert(c.key(), r?);
    }
    Ok(cells.iter().map(|c| cache[&c.key()].clone()).collect())
}

/// One line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    #[serde(rename = "C")]
    pub classes: usize,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    /// Repetition seed, or `median` for the aggregate over repetitions.
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

pub const MEDIAN: &str = "median";

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentTable {
    pub rows: Vec<ResultRow>,
}

impl ExperimentTable {
    pub fn build(cells: &[Cell], outcomes: &[CellOutcome]) -> Self {
        let mut rows = Vec::new();
        let row = |c: &Cell, seed: String, metric: &str, value: f64| ResultRow {
            experiment: c.experiment.name().to_string(),
            model: c.model.to_string(),
            classes: c.classes,
            f1: c.f1,
            f2: c.f2,
            seed,
            metric: metric.to_string(),
            value,
        };
        let metrics = |o: &CellOutcome| {
            let mut m = vec![("test_acc", o.test_acc)];
            if let Some(v) = o.minority_acc {
                m.push(("minority_acc", v));
            }
            m
        };
        for (c, o) in cells.iter().zip(outcomes) {
            for (name, v) in metrics(o) {
                rows.push(row(c, o.seed.to_string(), name, v));
            }
        }
        // groups in first-appearance order
        let mut groups: Vec<(Cell, Vec<&CellOutcome>)> = Vec::new();
        for (c, o) in cells.iter().zip(outcomes) {
            let same = |g: &Cell| g.model == c.model && g.classes == c.classes && g.f1 == c.f1 && g.f2 == c.f2;
            match groups.iter_mut().find(|(g, _)| same(g)) {
                Some((_, v)) => v.push(o),
                None => groups.push((*c, vec![o])),
            }
        }
        let mut summary: Vec<(Cell, &'static str, f64)> = Vec::new();
        for (c, outs) in &groups {
            for (i, (name, _)) in metrics(outs[0]).into_iter().enumerate() {
                let vals = outs.iter().map(|o| metrics(o)[i].1).collect();
                summary.push((*c, name, median(vals)));
            }
        }
        for (c, name, v) in &summary {
            rows.push(row(c, MEDIAN.into(), name, *v));
        }
        // relative improvement over the transformer cell with the same C, f1, f2
        for (c, name, v) in &summary {
            if c.model == ModelKind::Transformer {
                continue;
            }
            let base = summary.iter().find(|(b, n, _)| {
                b.model == ModelKind::Transformer && b.classes == c.classes && b.f1 == c.f1 && b.f2 == c.f2 && n == name
            });
            if let Some((_, _, t)) = base {
                if *t > 0.0 {
                    rows.push(row(c, MEDIAN.into(), &format!("rel_improvement_{name}"), (v - t) / t));
                }
            }
        }
        Self { rows }
    }

    /// Median `metric` of `model` at (C, f1, f2).
    pub fn median(&self, model: ModelKind, classes: usize, f1: Option<f64>, f2: Option<f64>, metric: &str) -> Option<f64> {
        let name = model.to_string();
        self.rows
            .iter()
            .find(|r| r.seed == MEDIAN && r.model == name && r.classes == classes && r.f1 == f1 && r.f2 == f2 && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("rows serialize");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs one experiment end to end.
pub fn run_experiment(
    experiment: Experiment,
    cfg: &ExperimentConfig,
    jobs: usize,
    cache: &mut CellCache,
) -> Result<(ExperimentTable, Vec<(Cell, CellOutcome)>)> {
    let cells = cells(experiment, cfg);
    let outcomes = run_cells(cfg, &cells, jobs, cache)?;
    let table = ExperimentTable::build(&cells, &outcomes);
    Ok((table, cells.into_iter().zip(outcomes).collect()))
}
