//! Versioned JSON checkpoints: run config, dataset statistics and every
//! named parameter array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub variable_names: Vec<String>,
    /// Training-range statistics used to standardize inputs.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub text_ids: Vec<String>,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &RunConfig, mean: &[f64], std: &[f64]) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: RunConfig {
                model: model.config.clone(),
                train: config.train.clone(),
            },
            variable_names: model.variable_names.clone(),
            mean: mean.to_vec(),
            std: std.to_vec(),
            text_ids: model.texts.stable_ids().map(String::from).collect(),
            params: model
                .params
                .iter()
                .map(|(_, name, t)| NamedArray {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and overwrites every parameter with the stored values.
    pub fn restore(&self) -> Result<Model> {
        let width = self.config.model.d_model;
        let placeholders: Vec<(String, Vec<f64>)> =
            self.text_ids.iter().map(|id| (id.clone(), vec![0.0; width])).collect();
        let mut model = Model::new(&self.config.model, &self.variable_names, &[], &placeholders, 0)?;
        let arrays = self
            .params
            .iter()
            .map(|a| {
                Tensor::new(a.shape.clone(), a.data.clone())
                    .map(|t| (a.name.clone(), t))
                    .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", a.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        model.params.load_from(&arrays)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Checkpoint("checkpoint has no version field".into())),
        }
        let ckpt: Self = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.config.validate()?;
        if ckpt.mean.len() != ckpt.variable_names.len() || ckpt.std.len() != ckpt.variable_names.len() {
            return Err(Error::Checkpoint("statistics do not match the variable count".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                input_len: 16,
                horizon: 4,
                d_model: 4,
                patch_len: 4,
                patch_stride: 4,
                n_experts: 2,
                top_k: 1,
                n_blocks: 1,
                chart_height: 4,
                image_depth: 1,
                graph_layers: 1,
                head_scales: vec![2, 3],
                weight_hidden: 3,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_parameters() {
        let cfg = small();
        let names = vec!["a".to_string(), "b".to_string()];
        let events = vec!["holiday".to_string()];
        let model = Model::new(&cfg.model, &names, &events, &[], 9).unwrap();
        let ckpt = Checkpoint::capture(&model, &cfg, &[0.0, 1.0], &[1.0, 2.0]);
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.restore().unwrap();
        assert_eq!(restored.params.len(), model.params.len());
        for ((_, na, a), (_, nb, b)) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn version_is_mandatory() {
        let cfg = small();
        let model = Model::new(&cfg.model, &["a".to_string()], &[], &[], 1).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&Checkpoint::capture(&model, &cfg, &[0.0], &[1.0]).to_json().unwrap()).unwrap();
        json["version"] = serde_json::json!(7);
        assert!(matches!(Checkpoint::from_json(&json.to_string()), Err(Error::Checkpoint(_))));
        json.as_object_mut().unwrap().remove("version");
        assert!(matches!(Checkpoint::from_json(&json.to_string()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small();
        let model = Model::new(&cfg.model, &["a".to_string()], &[], &[], 1).unwrap();
        let mut ckpt = Checkpoint::capture(&model, &cfg, &[0.0], &[1.0]);
        let p = &mut ckpt.params[0];
        p.shape = vec![p.data.len()];
        assert!(matches!(ckpt.restore(), Err(Error::Checkpoint(_))));
    }
}
