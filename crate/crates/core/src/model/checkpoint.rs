//! Model checkpoints as versioned JSON.
//!
//! ```text
//! { "version": 1,
//!   "config": AmformerConfig,
//!   "input": {"n_numeric", "cardinalities"},
//!   "schema": FeatureSchema | null,
//!   "stats": NormStats | null,
//!   "params": [{"name", "shape", "data"}, ...] }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! saved model reloads bit for bit.

use std::path::Path;

use amformer_grad::Parameter;
use serde::{Deserialize, Serialize};

use super::{AmformerConfig, InputSpec, Model};
use crate::error::{Error, Result};
use crate::tabular::{FeatureSchema, NormStats};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: AmformerConfig,
    pub input: InputSpec,
    pub schema: Option<FeatureSchema>,
    pub stats: Option<NormStats>,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn new(model: &Model, schema: Option<FeatureSchema>, stats: Option<NormStats>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            input: model.input.clone(),
            schema,
            stats,
            params: model
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                })
                .collect(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        let params = self
            .params
            .iter()
            .map(|p| Parameter::new(p.name.clone(), &p.shape, p.data.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Model::from_parts(self.config.clone(), self.input.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::TaskKind;

    #[test]
    fn round_trip_is_exact() {
        let cfg = AmformerConfig {
            d: 8,
            heads: 2,
            ..AmformerConfig::desk(TaskKind::Multiclass { classes: 3 })
        };
        let model = Model::new(cfg, InputSpec::numeric(3), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(&model, None, None).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().model().unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
    }
}
