//! The run configuration file.
//!
//! A TOML document whose top-level `preset` key (`desk` or `paper`) selects the
//! defaults; every other key overrides one field of the preset. Unknown keys are
//! rejected. `--set a.b=v` edits the document before it is decoded, so overrides
//! and file values go through the same checks.

use std::path::{Path, PathBuf};

use amformer::model::AmformerConfig;
use amformer::tabular::TaskKind;
use amformer::train::experiment::{ExperimentConfig, ModelKind};
use amformer::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "AMFORMER_OUTPUT_ROOT";

/// Name of the effective-config echo written next to every command's outputs.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTask {
    /// Responses binned into `classes` equal-frequency classes.
    #[default]
    Classification,
    /// The raw response as the target.
    Regression,
}

/// Synthetic data written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_features: usize,
    pub n_terms: usize,
    pub classes: usize,
    pub n_samples: usize,
    pub train_frac: f64,
    pub task: DataTask,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_features: 8,
            n_terms: 5,
            classes: 64,
            n_samples: 20_000,
            train_frac: 0.8,
            task: DataTask::Classification,
        }
    }
}

/// Experiment grid; the model and schedule come from `[model]` and `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub repetitions: usize,
    pub n_features: usize,
    pub n_terms: usize,
    pub n_samples: usize,
    pub train_frac: f64,
    pub classes: Vec<usize>,
    pub fixed_classes: usize,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub models: Vec<ModelKind>,
}

impl From<&ExperimentConfig> for ExperimentSection {
    fn from(e: &ExperimentConfig) -> Self {
        Self {
            repetitions: e.repetitions,
            n_features: e.n_features,
            n_terms: e.n_terms,
            n_samples: e.n_samples,
            train_frac: e.train_frac,
            classes: e.classes.clone(),
            fixed_classes: e.fixed_classes,
            f1: e.f1.clone(),
            f2: e.f2.clone(),
            models: e.models.clone(),
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        (&ExperimentConfig::desk()).into()
    }
}

/// Overrides applied to `[model]` for the gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub d: usize,
    pub k: usize,
    /// Prompt rows in every layer.
    pub prompts: usize,
    pub n_features: usize,
    pub batch: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            d: 8,
            k: 2,
            prompts: 3,
            n_features: 4,
            batch: 2,
            h: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopcountSection {
    /// Feature counts to tabulate.
    pub n: Vec<usize>,
    /// Prompt rows in every layer.
    pub prompts: usize,
    /// Also time eval-mode forward passes (adds non-deterministic columns).
    pub timing: bool,
    pub timing_batch: usize,
    pub timing_repeats: usize,
}

impl Default for FlopcountSection {
    fn default() -> Self {
        Self {
            n: vec![128, 256, 512],
            prompts: 64,
            timing: false,
            timing_batch: 8,
            timing_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `paper`.
    pub preset: String,
    /// Master seed for data, initialisation, shuffling and dropout. Replaces `train.seed`.
    pub seed: u64,
    /// Relative paths resolve against `$AMFORMER_OUTPUT_ROOT` (default: the working directory).
    pub output_dir: PathBuf,
    /// Where `train` looks for `train.csv` / `test.csv`; defaults to `output_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub data: DataSection,
    /// `task` is taken from the data and may be omitted.
    pub model: AmformerConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub gradcheck: GradcheckSection,
    pub flopcount: FlopcountSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let exp = ExperimentConfig::preset(name)?;
        let task = TaskKind::Multiclass { classes: 64 };
        Ok(Self {
            preset: name.to_string(),
            seed: exp.base_seed,
            output_dir: PathBuf::from("runs"),
            data_dir: None,
            data: DataSection {
                n_samples: exp.n_samples,
                ..DataSection::default()
            },
            model: AmformerConfig::preset(name, task)?,
            train: TrainConfig {
                eval_every: 1,
                ..TrainConfig::preset(name)?
            },
            experiment: (&exp).into(),
            gradcheck: GradcheckSection::default(),
            flopcount: FlopcountSection::default(),
        })
    }

    /// Decodes a TOML document over its preset, applying `sets` first.
    pub fn from_toml(text: &str, origin: &str, sets: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let preset = match doc.get("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(p)) => p.clone(),
            Some(other) => {
                return Err(CliError::Validation(format!("{origin}: key `preset`: expected a string, got {other}")));
            }
        };
        let base = Self::preset(&preset).map_err(|e| CliError::Validation(format!("{origin}: key `preset`: {e}")))?;
        let base = toml::Table::try_from(&base).expect("configs serialize");
        let decode = |over: toml::Table| -> Result<RunConfig, toml::de::Error> {
            let mut merged = base.clone();
            merge(&mut merged, over);
            toml::Value::Table(merged).try_into()
        };
        let cfg = match decode(doc.clone()) {
            Ok(cfg) => cfg,
            Err(e) => {
                // name the offending top-level key
                let culprit = doc
                    .iter()
                    .find(|(k, v)| decode(toml::Table::from_iter([((*k).clone(), (*v).clone())])).is_err())
                    .map(|(k, _)| format!(" key `{k}`:"))
                    .unwrap_or_default();
                return Err(CliError::Validation(format!("{origin}:{culprit} {}", e.message().trim())));
            }
        };
        cfg.validate().map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    /// Reads `path`, or the desk preset when `path` is `None`.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text, &p.display().to_string(), sets)
            }
            None => Self::from_toml("", "<defaults>", sets),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    pub fn validate(&self) -> Result<(), String> {
        let err = |k: &str, e: amformer::Error| format!("[{k}] {e}");
        self.model.validate().map_err(|e| err("model", e))?;
        self.train.validate().map_err(|e| err("train", e))?;
        self.experiment().validate().map_err(|e| err("experiment", e))?;
        let d = &self.data;
        if d.n_features == 0 || d.n_terms == 0 || d.classes < 2 || d.n_samples < 2 * d.classes {
            return Err(format!(
                "[data] need n_features, n_terms >= 1, classes >= 2 and n_samples >= 2·classes, got {d:?}"
            ));
        }
        if !(d.train_frac > 0.0 && d.train_frac < 1.0) {
            return Err(format!("[data] train_frac must lie in (0, 1), got {}", d.train_frac));
        }
        if self.flopcount.n.is_empty() || self.flopcount.prompts == 0 {
            return Err("[flopcount] need at least one n and prompts >= 1".into());
        }
        Ok(())
    }

    /// Train settings with the master seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let e = &self.experiment;
        ExperimentConfig {
            base_seed: self.seed,
            repetitions: e.repetitions,
            n_features: e.n_features,
            n_terms: e.n_terms,
            n_samples: e.n_samples,
            train_frac: e.train_frac,
            classes: e.classes.clone(),
            fixed_classes: e.fixed_classes,
            f1: e.f1.clone(),
            f2: e.f2.clone(),
            models: e.models.clone(),
            model: self.model.clone(),
            train: TrainConfig {
                eval_every: 0,
                ..self.train.clone()
            },
        }
    }

    /// `output_dir`, resolved against `$AMFORMER_OUTPUT_ROOT` when relative.
    pub fn output_path(&self) -> PathBuf {
        resolve(&self.output_dir)
    }

    pub fn data_path(&self) -> PathBuf {
        self.data_dir.as_deref().map(resolve).unwrap_or_else(|| self.output_path())
    }
}

fn resolve(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a bare string.
fn apply_set(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set `{assignment}`: expected key=value")))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("--set `{assignment}`: empty key segment")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Validation(format!("--set `{key}`: `{p}` is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), "echo", &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn paper_preset_round_trip() {
        let cfg = RunConfig::from_toml("preset = \"paper\"", "t", &[]).unwrap();
        assert_eq!(cfg.model.d, 192);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), "echo", &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RunConfig::from_toml("[model]\nwidth = 3\n", "cfg.toml", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml") && msg.contains("`model`") && msg.contains("width"), "{msg}");
    }

    #[test]
    fn sets_override_file_values() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 5\n",
            "t",
            &["train.epochs=7".into(), "model.norm=pre".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.norm, amformer::model::NormPosition::Pre);
        assert_eq!(cfg.train_config().seed, 9);
        assert!(RunConfig::from_toml("", "t", &["model.d".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_validation_errors() {
        let err = RunConfig::from_toml("[model]\nd = 30\nheads = 4\n", "t", &[]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("[model]"), "{err}");
    }
}
