//! JSON checkpoint container tagged `intentnet-v1`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use super::NetError;
use crate::features::FeatureConfig;

pub const CHECKPOINT_FORMAT: &str = "intentnet-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, features: &FeatureConfig, params: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            features: features.clone(),
            params: params
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedArray {
                    name,
                    shape,
                    data: data.clone(),
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<(ModelConfig, FeatureConfig, ModelParams), NetError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!(
                "unsupported format tag {:?}",
                self.format
            )));
        }
        self.config.validate()?;
        let mut params = ModelParams::zeros_like(&self.config);
        let expected = params.tensors();
        if expected.len() != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "{} arrays, model needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), arr) in expected.iter().zip(&self.params) {
            if *name != arr.name || *shape != arr.shape || arr.data.len() != shape.iter().product::<usize>() {
                return Err(NetError::Checkpoint(format!(
                    "array {} {:?} does not match expected {name} {shape:?}",
                    arr.name, arr.shape
                )));
            }
        }
        let flat: Vec<f64> = self.params.into_iter().flat_map(|a| a.data).collect();
        params.load_flat(&flat)?;
        if !params.all_finite() {
            return Err(NetError::Checkpoint("non-finite parameter values".into()));
        }
        Ok((self.config, self.features, params))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let text = serde_json::to_string(self).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = fs::read_to_string(path)
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::new(&cfg, &FeatureConfig::default(), &p).save(&path).unwrap();
        let (c2, f2, p2) = Checkpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(f2, FeatureConfig::default());
        assert_eq!(p2, p);
    }

    #[test]
    fn wrong_tag_rejected() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let mut ck = Checkpoint::new(&cfg, &FeatureConfig::default(), &p);
        ck.format = "intentnet-v0".into();
        assert!(ck.into_params().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let mut ck = Checkpoint::new(&cfg, &FeatureConfig::default(), &p);
        ck.params[0].shape = vec![1, 1];
        assert!(ck.into_params().is_err());
    }
}
