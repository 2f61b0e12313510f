use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ProbeConfig;
use crate::certify::CertifyConfig;
use crate::data::{read_cifar10_binary, synthetic_blobs_split, Dataset};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::EncoderConfig;
use crate::pretrain::PretrainConfig;
use crate::schedule::ScheduleConfig;

use super::read_dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory by `synthetic_blobs_split`.
    Synthetic,
    /// A dataset file written by `gen-data`.
    File,
    /// CIFAR-10 binary batches.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub margin: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Training file (`file`, `cifar10`).
    pub train_path: Option<PathBuf>,
    /// Test file (`file`, `cifar10`).
    pub test_path: Option<PathBuf>,
    /// Number of test samples certified, stride-selected.
    pub certify_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 4,
            shape: [1, 8, 8],
            margin: 4.0,
            train_per_class: 500,
            test_per_class: 25,
            train_path: None,
            test_path: None,
            certify_count: 100,
        }
    }
}

impl DataConfig {
    /// `(train, test)` splits.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("data.{what} is required for this source")))
        };
        match self.source {
            DataSource::Synthetic => synthetic_blobs_split(
                self.num_classes,
                self.train_per_class,
                self.test_per_class,
                self.shape,
                self.margin,
                seed,
            ),
            DataSource::File => Ok((
                read_dataset(&need(&self.train_path, "train_path")?)?,
                read_dataset(&need(&self.test_path, "test_path")?)?,
            )),
            DataSource::Cifar10 => Ok((
                read_cifar10_binary(&need(&self.train_path, "train_path")?)?,
                read_cifar10_binary(&need(&self.test_path, "test_path")?)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub radius_max: f64,
    pub radius_step: f64,
    pub probe_sigmas: Vec<f64>,
    pub probe: ProbeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            radius_max: 1.0,
            radius_step: 0.05,
            probe_sigmas: vec![0.0, 0.25, 0.5, 1.0],
            probe: ProbeConfig::default(),
        }
    }
}

/// Everything a command needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub certify: CertifyConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            schedule: ScheduleConfig::default(),
            model: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            certify: CertifyConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.certify.validate()?;
        if self.model.input_shape != self.data.shape && self.data.source == DataSource::Synthetic {
            return Err(Error::Config(format!(
                "model.input_shape {:?} differs from data.shape {:?}",
                self.model.input_shape, self.data.shape
            )));
        }
        Ok(())
    }
}
