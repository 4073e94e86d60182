//! Column-typed datasets, CSV persistence and z-score normalization.
//!
//! CSV layout: UTF-8, comma separated, one header row naming every feature
//! column in schema order followed by the label column. Floats are written in
//! shortest round-trip form, so `read_csv(write_csv(d)) == d` bit for bit.
//!
//! Schema and normalization statistics travel in a JSON sidecar
//! (`<file>.json` by convention) with fields
//! `{version, columns, label, task, means, stds, generator_spec?}`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIDECAR_VERSION: u32 = 1;

/// Columns whose std falls below this are passed through unscaled.
pub const MIN_STD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical { cardinality: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass { classes: usize },
    Regression,
}

impl TaskKind {
    /// Width of the prediction head.
    pub fn outputs(&self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Multiclass { classes } => *classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            TaskKind::Regression => None,
            _ => Some(self.outputs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
    pub label: String,
    pub task: TaskKind,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate column name `{}`", c.name)));
            }
            if let ColumnKind::Categorical { cardinality } = c.kind {
                if cardinality < 2 {
                    return Err(Error::Config(format!(
                        "categorical column `{}` needs cardinality >= 2, got {cardinality}",
                        c.name
                    )));
                }
            }
        }
        if seen.contains(self.label.as_str()) {
            return Err(Error::Config(format!("label `{}` is also a feature column", self.label)));
        }
        match self.task {
            TaskKind::Multiclass { classes } if classes < 2 => {
                Err(Error::Config(format!("multiclass task needs >= 2 classes, got {classes}")))
            }
            _ => Ok(()),
        }
    }

    pub fn numeric_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Numeric)
    }

    pub fn categorical_columns(&self) -> impl Iterator<Item = (&ColumnSpec, usize)> {
        self.columns.iter().filter_map(|c| match c.kind {
            ColumnKind::Categorical { cardinality } => Some((c, cardinality)),
            ColumnKind::Numeric => None,
        })
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_columns().count()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical_columns().map(|(_, c)| c).collect()
    }

    /// All numeric columns followed by a class label.
    pub fn numeric(names: impl IntoIterator<Item = String>, label: &str, task: TaskKind) -> Self {
        Self {
            columns: names
                .into_iter()
                .map(|name| ColumnSpec {
                    name,
                    kind: ColumnKind::Numeric,
                })
                .collect(),
            label: label.to_string(),
            task,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(rows.iter().map(|&r| v[r]).collect()),
            Labels::Values(v) => Labels::Values(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Per-column z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f64>,
    /// Population standard deviations as measured (before the constant-column rule).
    pub stds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl NormStats {
    fn divisor(&self, j: usize) -> f64 {
        if self.stds[j] < MIN_STD {
            1.0
        } else {
            self.stds[j]
        }
    }
}

/// Numeric matrix (row-major), categorical index matrix and labels under one schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub numeric: Vec<f64>,
    pub categorical: Vec<usize>,
    pub labels: Labels,
    /// Statistics this dataset was normalized with, if any.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        schema: FeatureSchema,
        numeric: Vec<f64>,
        categorical: Vec<usize>,
        labels: Labels,
    ) -> Result<Self> {
        schema.validate()?;
        let n = labels.len();
        let (nn, cards) = (schema.n_numeric(), schema.cardinalities());
        if numeric.len() != n * nn || categorical.len() != n * cards.len() {
            return Err(Error::Data(format!(
                "{n} rows need {} numeric and {} categorical cells, got {} and {}",
                n * nn,
                n * cards.len(),
                numeric.len(),
                categorical.len()
            )));
        }
        if !cards.is_empty() {
            for (i, row) in categorical.chunks_exact(cards.len()).enumerate() {
                for (j, (&v, &card)) in row.iter().zip(&cards).enumerate() {
                    if v >= card {
                        return Err(Error::Data(format!(
                            "row {i}: categorical column {j} index {v} >= cardinality {card}"
                        )));
                    }
                }
            }
        }
        match (&labels, schema.task.classes()) {
            (Labels::Classes(v), Some(c)) => {
                if let Some(bad) = v.iter().find(|&&l| l >= c) {
                    return Err(Error::Data(format!("class label {bad} outside [0, {c})")));
                }
            }
            (Labels::Values(_), None) => {}
            _ => return Err(Error::Data("label kind does not match the task".into())),
        }
        Ok(Self {
            schema,
            numeric,
            categorical,
            labels,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_numeric(&self) -> usize {
        self.schema.n_numeric()
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical.len().checked_div(self.len()).unwrap_or(0)
    }

    pub fn numeric_row(&self, i: usize) -> &[f64] {
        let n = self.n_numeric();
        &self.numeric[i * n..(i + 1) * n]
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(v) => Some(v),
            Labels::Values(_) => None,
        }
    }

    /// Rows at `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let (nn, nc) = (self.n_numeric(), self.schema.cardinalities().len());
        let mut numeric = Vec::with_capacity(rows.len() * nn);
        let mut categorical = Vec::with_capacity(rows.len() * nc);
        for &r in rows {
            numeric.extend_from_slice(&self.numeric[r * nn..(r + 1) * nn]);
            categorical.extend_from_slice(&self.categorical[r * nc..(r + 1) * nc]);
        }
        Dataset {
            schema: self.schema.clone(),
            numeric,
            categorical,
            labels: self.labels.select(rows),
            stats: self.stats.clone(),
        }
    }
}

/// Mean and population std of every numeric column.
pub fn fit_normalizer(train: &Dataset) -> NormStats {
    let nn = train.n_numeric();
    let n = train.len().max(1) as f64;
    let mut means = vec![0.0; nn];
    for row in train.numeric.chunks_exact(nn.max(1)) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = vec![0.0; nn];
    for row in train.numeric.chunks_exact(nn.max(1)) {
        for j in 0..nn {
            let d = row[j] - means[j];
            vars[j] += d * d;
        }
    }
    let stds: Vec<f64> = vars.into_iter().map(|v| (v / n).sqrt()).collect();
    let names: Vec<&str> = train.schema.numeric_columns().map(|c| c.name.as_str()).collect();
    let warnings: Vec<String> = stds
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < MIN_STD)
        .map(|(j, _)| format!("column `{}` is constant; left unscaled", names[j]))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    NormStats {
        means,
        stds,
        warnings,
    }
}

fn check_stats(ds: &Dataset, stats: &NormStats) -> Result<()> {
    let nn = ds.n_numeric();
    if stats.means.len() != nn || stats.stds.len() != nn {
        return Err(Error::Data(format!(
            "normalizer fitted on {} columns applied to {nn}",
            stats.means.len()
        )));
    }
    Ok(())
}

/// `(x − mean) / std` per numeric column.
pub fn apply_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    check_stats(ds, stats)?;
    let nn = ds.n_numeric();
    let mut out = ds.clone();
    for row in out.numeric.chunks_exact_mut(nn.max(1)) {
        for j in 0..nn {
            row[j] = (row[j] - stats.means[j]) / stats.divisor(j);
        }
    }
    out.stats = Some(stats.clone());
    Ok(out)
}

/// Undoes [`apply_normalizer`].
pub fn invert_normalizer(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    check_stats(ds, stats)?;
    let nn = ds.n_numeric();
    let mut out = ds.clone();
    for row in out.numeric.chunks_exact_mut(nn.max(1)) {
        for j in 0..nn {
            row[j] = row[j] * stats.divisor(j) + stats.means[j];
        }
    }
    out.stats = None;
    Ok(out)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut header: Vec<&str> = ds.schema.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(&ds.schema.label);
    w.write_record(&header).map_err(csv_err)?;

    let (nn, nc) = (ds.n_numeric(), ds.schema.cardinalities().len());
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        record.clear();
        let (mut ni, mut ci) = (0, 0);
        for c in &ds.schema.columns {
            match c.kind {
                ColumnKind::Numeric => {
                    record.push(ds.numeric[i * nn + ni].to_string());
                    ni += 1;
                }
                ColumnKind::Categorical { .. } => {
                    record.push(ds.categorical[i * nc + ci].to_string());
                    ci += 1;
                }
            }
        }
        record.push(match &ds.labels {
            Labels::Classes(v) => v[i].to_string(),
            Labels::Values(v) => v[i].to_string(),
        });
        w.write_record(&record).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let header = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let mut expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    expected.push(&schema.label);
    for (pos, name) in expected.iter().enumerate() {
        match header.get(pos) {
            Some(h) if h == *name => {}
            Some(h) => {
                return Err(fmt(format!(
                    "header column {pos} is `{h}`, expected column `{name}`"
                )))
            }
            None => return Err(fmt(format!("missing column `{name}`"))),
        }
    }
    if header.len() != expected.len() {
        return Err(fmt(format!(
            "unexpected extra column `{}`",
            &header[expected.len()]
        )));
    }

    let (mut numeric, mut categorical) = (Vec::new(), Vec::new());
    let (mut classes, mut values) = (Vec::new(), Vec::new());
    let n_classes = schema.task.classes();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| fmt(format!("row {row}: {e}")))?;
        let cell = |col: usize, msg: String| Error::Cell {
            path: path.to_path_buf(),
            row,
            column: expected[col].to_string(),
            msg,
        };
        for (j, c) in schema.columns.iter().enumerate() {
            let raw = rec.get(j).unwrap_or("");
            match c.kind {
                ColumnKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| cell(j, format!("cannot parse `{raw}` as a number")))?;
                    numeric.push(v);
                }
                ColumnKind::Categorical { cardinality } => {
                    let v: usize = raw.parse().map_err(|_| cell(j, format!("cannot parse `{raw}` as a category index")))?;
                    if v >= cardinality {
                        return Err(cell(j, format!("category {v} >= cardinality {cardinality}")));
                    }
                    categorical.push(v);
                }
            }
        }
        let lj = schema.columns.len();
        let raw = rec.get(lj).unwrap_or("");
        match n_classes {
            Some(c) => {
                let v: usize = raw.parse().map_err(|_| cell(lj, format!("cannot parse `{raw}` as a class id")))?;
                if v >= c {
                    return Err(cell(lj, format!("class {v} >= class count {c}")));
                }
                classes.push(v);
            }
            None => {
                let v: f64 = raw.parse().map_err(|_| cell(lj, format!("cannot parse `{raw}` as a number")))?;
                values.push(v);
            }
        }
    }
    let labels = match n_classes {
        Some(_) => Labels::Classes(classes),
        None => Labels::Values(values),
    };
    Dataset::new(schema.clone(), numeric, categorical, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    pub columns: Vec<ColumnSpec>,
    pub label: String,
    pub task: TaskKind,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_spec: Option<serde_json::Value>,
}

impl Sidecar {
    pub fn new(schema: &FeatureSchema, stats: Option<&NormStats>, generator_spec: Option<serde_json::Value>) -> Self {
        Self {
            version: SIDECAR_VERSION,
            columns: schema.columns.clone(),
            label: schema.label.clone(),
            task: schema.task,
            means: stats.map(|s| s.means.clone()).unwrap_or_default(),
            stds: stats.map(|s| s.stds.clone()).unwrap_or_default(),
            generator_spec,
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            columns: self.columns.clone(),
            label: self.label.clone(),
            task: self.task,
        }
    }

    pub fn stats(&self) -> Option<NormStats> {
        (!self.means.is_empty()).then(|| NormStats {
            means: self.means.clone(),
            stds: self.stds.clone(),
            warnings: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if sc.version != SIDECAR_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported sidecar version {}", sc.version),
            });
        }
        Ok(sc)
    }
}

/// `data.csv` -> `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}
