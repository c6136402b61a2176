//! Experiment configuration: one JSON document holding every knob of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Missing sections take the toy defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synthetic: SyntheticConfig,
    /// Default dataset directory for commands that are not given one.
    pub data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale setup: 64 px frames, clips of 8, trained for 2k iterations.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            train: TrainConfig::toy(),
            inference: InferenceConfig::default(),
            synthetic: SyntheticConfig::default(),
            data: None,
        }
    }

    /// Full-scale hyper-parameters (448 px, clips of 30, 60k iterations of batch 24).
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            train: TrainConfig::full(),
            synthetic: SyntheticConfig {
                canvas_side: 448,
                object_size: [16, 160],
                frames: [60, 120],
                track_len: [5, 30],
                ..SyntheticConfig::default()
            },
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            _ => Err(Error::config(format!("unknown preset `{name}` (expected toy or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.synthetic.validate()?;
        if self.train.clip_len != self.model.clip_len {
            return Err(Error::config(format!(
                "train.clip_len {} differs from model.clip_len {}",
                self.train.clip_len, self.model.clip_len
            )));
        }
        if self.synthetic.canvas_side != self.model.input_side {
            return Err(Error::config(format!(
                "synthetic.canvas_side {} differs from model.input_side {}",
                self.synthetic.canvas_side, self.model.input_side
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            index: 0,
            path: e.path().to_string(),
            message: format!("{} ({})", e.inner(), path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
