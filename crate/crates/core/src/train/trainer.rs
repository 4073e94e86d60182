use std::time::Instant;

use amformer_grad::ops::{cross_entropy, mse_loss};
use amformer_grad::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::metrics::{accuracy, argmax_rows, auc, mse, Metrics};
use super::schedule::{lr_at, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{AmformerConfig, Batch, Mode, Model};
use crate::rng::{derive_seed, seeded, stream};
use crate::tabular::{Dataset, Labels, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub lr_trace: Vec<f64>,
    /// Metrics on the evaluation set after the last epoch.
    pub final_eval: Option<Metrics>,
    /// Excluded from the JSONL so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Epoch(&'a EpochRecord),
    Final {
        model: &'a str,
        seed: u64,
        config_hash: &'a str,
        steps: usize,
        epochs_completed: usize,
        lr_trace: &'a [f64],
        #[serde(skip_serializing_if = "Option::is_none")]
        eval: Option<&'a Metrics>,
    },
}

impl TrainReport {
    /// One JSON object per epoch followed by a final summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out += &serde_json::to_string(&Line::Epoch(e)).expect("records serialize");
            out.push('\n');
        }
        let fin = Line::Final {
            model: &self.model,
            seed: self.seed,
            config_hash: &self.config_hash,
            steps: self.steps,
            epochs_completed: self.epochs.len(),
            lr_trace: &self.lr_trace,
            eval: self.final_eval.as_ref(),
        };
        out += &serde_json::to_string(&fin).expect("records serialize");
        out.push('\n');
        out
    }
}

/// Hex SHA-256 of the canonical JSON of both configurations.
pub fn config_hash(model: &AmformerConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn default_loss(task: TaskKind) -> LossKind {
    match task {
        TaskKind::Regression => LossKind::MeanSquaredError,
        _ => LossKind::CrossEntropy,
    }
}

fn batch_loss(out: &Tensor, labels: &Labels, rows: &[usize], kind: LossKind) -> Result<Tensor> {
    match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(c)) => {
            let t: Vec<usize> = rows.iter().map(|&r| c[r]).collect();
            Ok(cross_entropy(out, &t)?)
        }
        (LossKind::MeanSquaredError, Labels::Values(v)) => {
            let t: Vec<f64> = rows.iter().map(|&r| v[r]).collect();
            Ok(mse_loss(out, &t)?)
        }
        (kind, _) => Err(Error::Config(format!("loss {kind:?} does not match the dataset labels"))),
    }
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.schema.task != model.config.task {
        return Err(Error::Config(format!(
            "dataset task {:?} does not match model head {:?}",
            ds.schema.task, model.config.task
        )));
    }
    let (nn, cards) = (ds.n_numeric(), ds.schema.cardinalities());
    if nn != model.input.n_numeric || cards != model.input.cardinalities {
        return Err(Error::Config("dataset columns do not match the model input".into()));
    }
    Ok(())
}

/// Raw model outputs for every row (`len × outputs`), evaluated in chunks.
pub fn predict_all(model: &Model, ds: &Dataset, chunk: usize) -> Result<Vec<f64>> {
    check_compatible(model, ds)?;
    let lv = model.constants();
    let mut out = Vec::with_capacity(ds.len() * model.config.task.outputs());
    let rows: Vec<usize> = (0..ds.len()).collect();
    for part in rows.chunks(chunk.max(1)) {
        let y = model.forward_with(&lv, &Batch::from_dataset(ds, part), Mode::Eval, None)?;
        out.extend_from_slice(y.data());
    }
    Ok(out)
}

/// Predicted class per row.
pub fn predict_classes(model: &Model, ds: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    let c = model.config.task.classes().ok_or_else(|| Error::Config("regression model has no classes".into()))?;
    Ok(argmax_rows(&predict_all(model, ds, chunk)?, c))
}

pub fn evaluate(model: &Model, ds: &Dataset, chunk: usize) -> Result<Metrics> {
    let out = predict_all(model, ds, chunk)?;
    let task = model.config.task;
    let t = Tensor::new(out.clone(), &[ds.len(), task.outputs()])?;
    match &ds.labels {
        Labels::Classes(labels) => {
            let c = task.outputs();
            let loss = cross_entropy(&t, labels)?.item()?;
            let auc = match task {
                TaskKind::Binary => {
                    let scores: Vec<f64> = out.chunks_exact(2).map(|r| r[1] - r[0]).collect();
                    let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                    auc(&scores, &pos).ok()
                }
                _ => None,
            };
            Ok(Metrics {
                loss,
                accuracy: Some(accuracy(&argmax_rows(&out, c), labels)?),
                auc,
                mse: None,
            })
        }
        Labels::Values(v) => {
            let m = mse(&out, v)?;
            Ok(Metrics {
                loss: m,
                accuracy: None,
                auc: None,
                mse: Some(m),
            })
        }
    }
}

const EVAL_CHUNK: usize = 1024;

/// Trains `model` in place with seeded shuffling and dropout.
///
/// A non-finite loss restores the parameters from the start of the failing
/// epoch and returns [`Error::NonFinite`].
pub fn train(model: &mut Model, train: &Dataset, valid: Option<&Dataset>, cfg: &TrainConfig, model_id: &str) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train)?;
    if let Some(v) = valid {
        check_compatible(model, v)?;
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let loss_kind = if cfg.loss == default_loss(model.config.task) {
        cfg.loss
    } else {
        return Err(Error::Config(format!(
            "loss {:?} does not fit a {:?} head",
            cfg.loss, model.config.task
        )));
    };
    let started = Instant::now();
    let mut shuffle = seeded(derive_seed(cfg.seed, &[stream::SHUFFLE]));
    let mut drop = seeded(derive_seed(cfg.seed, &[stream::DROPOUT]));
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut report = TrainReport {
        model: model_id.to_string(),
        seed: cfg.seed,
        config_hash: config_hash(&model.config, cfg),
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        lr_trace: Vec::new(),
        final_eval: None,
        wall_clock_s: 0.0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let last_good = model.params.clone();
        order.shuffle(&mut shuffle);
        let (mut total, mut seen) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            report.steps += 1;
            let lr = lr_at(report.steps, cfg);
            report.lr_trace.push(lr);
            let lv = model.leaves();
            let out = model.forward_with(&lv, &Batch::from_dataset(train, rows), Mode::Train, Some(&mut drop))?;
            let loss = batch_loss(&out, &train.labels, rows, loss_kind)?;
            let value = loss.item()?;
            if !value.is_finite() {
                model.params = last_good;
                return Err(Error::NonFinite {
                    what: "loss",
                    param: model_id.to_string(),
                    step: report.steps,
                });
            }
            loss.backward()?;
            let grads: Vec<Vec<f64>> = lv
                .iter()
                .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            opt.step(&mut model.params, &grads, lr)?;
            total += value * rows.len() as f64;
            seen += rows.len();
        }
        let due = cfg.eval_every > 0 && epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let eval = match valid {
            Some(v) if due => Some(evaluate(model, v, EVAL_CHUNK)?),
            _ => None,
        };
        log::debug!("{model_id} epoch {epoch}: loss {:.5} eval {:?}", total / seen as f64, eval);
        report.epochs.push(EpochRecord {
            epoch,
            step: report.steps,
            train_loss: total / seen as f64,
            lr: *report.lr_trace.last().expect("at least one step per epoch"),
            eval,
        });
    }
    report.final_eval = report.epochs.last().and_then(|e| e.eval.clone());
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}
