//! Run configuration: one TOML file holding every hyperparameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::{NmsConfig, PredictConfig};
use crate::training::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub nms: NmsConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.levels)?;
        self.nms.validate()?;
        self.eval.validate()?;
        let p = &self.predict;
        if !(0.0..1.0).contains(&p.pre_nms_threshold) || p.pre_nms_topk == 0 {
            return Err(Error::Config("pre_nms_threshold must lie in [0, 1) and pre_nms_topk be positive".into()));
        }
        if !(0.0..=1.0).contains(&p.mask_background) {
            return Err(Error::Config("predict.mask_background must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Small model and schedule that train in seconds on one core.
    pub fn desk() -> Self {
        let levels = 4;
        Self {
            model: ModelConfig {
                levels,
                input_dim: 16,
                feature_dim: 32,
                disc_hidden: 64,
                t_max: 64,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 60,
                lr: 3e-4,
                warmup_epochs: 5,
                level_weights: vec![1.0; levels],
                lambda_sada: 0.03,
                alpha: 0.3,
                log_val_map: false,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_unknown_keys() {
        let c = RunConfig::desk();
        let s = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&s).unwrap(), c);
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nlevels = 3\nt_max = 10\n").is_err());
    }

    #[test]
    fn shipped_configs_load() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(root.join("desk.toml")).unwrap(), RunConfig::desk());
        let s3 = RunConfig::load(root.join("s3.toml")).unwrap();
        assert_eq!(s3.model.levels, 6);
        assert_eq!(s3.train.level_weights, vec![0.4, 0.8, 0.7, 0.7, 0.9, 0.6]);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("[train]\nalpha = 0.5\n").unwrap();
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.model, ModelConfig::default());
    }
}
