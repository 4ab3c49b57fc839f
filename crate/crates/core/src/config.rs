//! One JSON document configuring every stage of a run.
//!
//! Every key has a default, so `{}` is a valid config; unknown keys are
//! rejected. The dumped default doubles as a list of all tunable constants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::LayerSpec;
use crate::error::{Error, Result};
use crate::mining::MinerConfig;
use crate::trainer::{NetOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub spec: LayerSpec,
    /// Shift every patch to zero mean before the network.
    pub mean_subtract: bool,
}

impl EncoderConfig {
    pub fn net(&self) -> NetOptions {
        NetOptions {
            spec: self.spec.clone(),
            mean_subtract: self.mean_subtract,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbours counted per retrieval query.
    pub k: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            probe_epochs: 300,
            probe_lr: 0.5,
        }
    }
}

/// Optional default locations; command-line paths take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub videos: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mine: MinerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.mine.validate()?;
        self.train.validate()?;
        self.encoder
            .spec
            .shapes()
            .map_err(|e| Error::Config(format!("encoder: {e}")))?;
        if self.encoder.spec.input_side != self.mine.patch_side {
            return Err(Error::Config(format!(
                "encoder.spec.input_side ({}) must equal mine.patch_side ({})",
                self.encoder.spec.input_side, self.mine.patch_side
            )));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval: k must be >= 1".into()));
        }
        if !(self.eval.probe_lr > 0.0 && self.eval.probe_lr.is_finite()) {
            return Err(Error::Config(format!(
                "eval: probe_lr must be positive, got {}",
                self.eval.probe_lr
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.mine.flow_threshold, 0.5);
        assert_eq!(cfg.train.margin, 0.5);
        assert_eq!(cfg.train.weight_decay, 0.0005);
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(17);
        cfg.train.total_iters = 5;
        cfg.encoder.mean_subtract = true;
        cfg.paths.out = Some("runs/a".into());
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"margn": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("margn"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"seed": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn validation_catches_inconsistency() {
        let mut cfg = RunConfig::default();
        cfg.mine.patch_side = 24;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mine.gate_low = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval.k = 0;
        assert!(cfg.validate().is_err());
    }
}
