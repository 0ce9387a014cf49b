//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{AblationConfig, ProbeConfig};
use crate::pipeline::PipelineConfig;
use crate::pretrain::{
    LossConfig, MaeConfig, ModelConfig, OptimizerConfig, PretrainConfig, TrainConfig,
};
use crate::synthgen::GeneratorConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Inputs default to files in the output directory.
    pub measurements: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Externally produced embeddings to fuse with ours during probing.
    pub extra_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub mae: MaeConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

fn toml_error(e: toml::de::Error) -> Error {
    let key = e
        .message()
        .split('`')
        .nth(1)
        .unwrap_or("config")
        .to_string();
    Error::config(key, e.to_string().trim().to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingInput(path.display().to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// A command-line seed replaces both the run seed and the generator seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.data.seed = s;
            self.generator.seed = s;
        }
        self
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model.clone(),
            loss: self.loss,
            optimizer: self.optimizer,
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.pipeline.validate()?;
        self.pretrain_config().validate()?;
        self.mae.validate()?;
        self.probe.validate()?;
        self.ablation.validate()
    }

    fn path_or(&self, p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| out.join(name))
    }

    pub fn measurements_path(&self, out: &Path) -> PathBuf {
        self.path_or(&self.data.measurements, out, "measurements.csv")
    }

    pub fn labels_path(&self, out: &Path) -> PathBuf {
        self.path_or(&self.data.labels, out, "labels.csv")
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.path_or(&self.data.checkpoint, out, "checkpoint.wbmc")
    }

    pub fn embeddings_path(&self, out: &Path) -> PathBuf {
        self.path_or(&self.data.embeddings, out, "embeddings.wbme")
    }
}
