//! Finite-difference verification of whole models over the ablation grid.

use amformer_grad::ops::{cross_entropy, mse_loss};
use amformer_grad::{grad_check, GradCheckReport, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::attention::min_topk_gap;
use super::config::{toggle_name, AmformerConfig, ABLATION_GRID};
use super::{Batch, InputSpec, Mode, Model};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, stream, Rng};
use crate::tabular::TaskKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Base model; the stream and prompt toggles are overridden per row.
    pub model: AmformerConfig,
    pub n_features: usize,
    pub batch: usize,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    /// Desk model shrunk to d = 8, k = 2 with 3 prompts per layer, 4 features, batch 2.
    fn default() -> Self {
        let desk = AmformerConfig::desk(TaskKind::Multiclass { classes: 3 });
        Self {
            model: AmformerConfig {
                d: 8,
                k: 2,
                prompt_schedule: vec![3; desk.layers],
                ..desk
            },
            n_features: 4,
            batch: 2,
            h: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub report: GradCheckReport,
    pub passed: bool,
    /// Draws needed to reach a well-conditioned point.
    pub attempts: usize,
}

/// Moves a freshly initialised model to a generic point: layer-norm gains and
/// offsets from U(0.5, 1.5), embeddings, Q/K/V projections and the head from
/// U(−1, 1).
///
/// At initialisation the offsets are zero and the projections small, which
/// leaves many gradient entries near 1e-8, where central differences at
/// h = 1e-5 are limited by roundoff of a loss of order one.
pub fn generic_point(model: &mut Model, rng: &mut Rng) {
    for p in &mut model.params {
        let n = p.name.as_str();
        let range = if n.ends_with(".gamma") || n.ends_with(".beta") {
            0.5..1.5
        } else if n.starts_with("embed.") || n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") || n == "head.w" {
            -1.0..1.0
        } else {
            continue;
        };
        p.data.iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
    }
}

/// Analytic gradients smaller than this (but nonzero) sit inside the
/// finite-difference roundoff band and make a check point ill-conditioned.
pub const MIN_CHECKED_GRAD: f64 = 3e-6;

/// Smallest accepted gap between kept and dropped top-k scores. Parameter
/// steps of size h move scores by far less, so the kept sets stay fixed across
/// every finite-difference stencil.
pub const MIN_TOPK_GAP: f64 = 1e-3;

/// Draws per configuration before giving up on a well-conditioned point.
pub const MAX_ATTEMPTS: usize = 64;

/// A random batch with targets for the model's task.
pub struct Probe {
    batch: Batch,
    classes: Vec<usize>,
    values: Vec<f64>,
    task: TaskKind,
}

impl Probe {
    pub fn new(model: &Model, size: usize, rng: &mut Rng) -> Result<Self> {
        if model.input.n_tokens() != model.input.n_numeric {
            return Err(Error::Config("gradient check supports numeric inputs only".into()));
        }
        let n = model.input.n_numeric;
        let task = model.config.task;
        Ok(Self {
            batch: Batch::numeric_only(size, (0..size * n).map(|_| rng.random_range(-2.0..2.0)).collect()),
            classes: (0..size).map(|i| i % task.outputs()).collect(),
            values: (0..size).map(|_| rng.random_range(-1.0..1.0)).collect(),
            task,
        })
    }

    fn loss(&self, model: &Model, lv: &[Tensor]) -> amformer_grad::Result<Tensor> {
        let out = model
            .forward_with(lv, &self.batch, Mode::Eval, None)
            .map_err(|e| amformer_grad::GradError::Config {
                op: "forward",
                msg: e.to_string(),
            })?;
        match self.task {
            TaskKind::Regression => mse_loss(&out, &self.values),
            _ => cross_entropy(&out, &self.classes),
        }
    }

    /// True when every analytic gradient entry is exactly zero or at least
    /// [`MIN_CHECKED_GRAD`] in magnitude, and no top-k selection is within
    /// [`MIN_TOPK_GAP`] of switching.
    pub fn well_conditioned(&self, model: &Model) -> Result<bool> {
        let lv = model.leaves();
        let (loss, gap) = min_topk_gap(|| self.loss(model, &lv));
        loss?.backward()?;
        Ok(gap >= MIN_TOPK_GAP
            && lv
                .iter()
                .filter_map(|t| t.grad())
                .flatten()
                .all(|g| g == 0.0 || g.abs() >= MIN_CHECKED_GRAD))
    }

    pub fn check(&self, model: &Model, h: f64) -> Result<GradCheckReport> {
        Ok(grad_check(&model.params, h, |lv| self.loss(model, lv))?)
    }
}

/// One row per ablation configuration, in grid order.
///
/// Each row draws (initialisation, generic point, batch) triples until the
/// analytic gradient is well conditioned, then compares it with central
/// differences. Tiny nonzero entries are excluded this way rather than by
/// loosening the error measure.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    if !(cfg.h > 0.0) || cfg.batch == 0 || cfg.n_features == 0 {
        return Err(Error::Config("gradcheck needs h > 0, batch >= 1 and n_features >= 1".into()));
    }
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for (tag, &(additive, multiplicative, prompts)) in ABLATION_GRID.iter().enumerate() {
        let mcfg = AmformerConfig {
            use_additive: additive,
            use_multiplicative: multiplicative,
            use_prompts: prompts,
            ..cfg.model.clone()
        };
        let name = toggle_name(additive, multiplicative, prompts);
        let mut attempt = 0;
        let (model, probe) = loop {
            let labels = [stream::GRADCHECK, tag as u64, attempt as u64];
            let mut model = Model::new(mcfg.clone(), InputSpec::numeric(cfg.n_features), derive_seed(cfg.seed, &labels))?;
            let mut rng = seeded(derive_seed(cfg.seed, &[labels[0], labels[1], labels[2], stream::SYNTH_DATA]));
            generic_point(&mut model, &mut rng);
            let probe = Probe::new(&model, cfg.batch, &mut rng)?;
            attempt += 1;
            if attempt == MAX_ATTEMPTS || probe.well_conditioned(&model)? {
                break (model, probe);
            }
        };
        let report = probe.check(&model, cfg.h)?;
        log::info!(
            "{name}: max rel err {:.3e} at {}[{}] after {attempt} draw(s)",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
        rows.push(GradcheckRow {
            passed: report.max_rel_err < cfg.tolerance,
            name,
            attempts: attempt,
            report,
        });
    }
    Ok(rows)
}
