use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use theseus_core::conversion::{ConversionConfig, MappingSpec, ScheduleKind};
use theseus_core::data::{Dataset, DatasetSpec};
use theseus_core::nets::{deep_mlp_spec, toy_cnn_spec, toy_transformer_spec, ModelSpec};
use theseus_core::similarity::MetricSpec;
use theseus_core::training::{DistillConfig, TrainConfig};

use crate::error::{HarnessError, Result};

/// Guide architecture, either from the zoo (sized from the dataset) or spelled
/// out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    ToyCnn { channels: usize, slots: usize },
    DeepMlp { width: usize, hidden: usize, depth: usize },
    ToyTransformer { dim: usize, hidden: usize, blocks: usize },
    Custom { spec: ModelSpec },
}

impl ArchSpec {
    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let shape = &data.input_shape;
        Ok(match self {
            ArchSpec::ToyCnn { channels, slots } => {
                if shape.len() != 3 {
                    return Err(HarnessError::Config(format!(
                        "toy-cnn needs image inputs, got {shape:?}"
                    )));
                }
                toy_cnn_spec(shape[0], shape[1], *channels, *slots, data.classes)
            }
            ArchSpec::DeepMlp { width, hidden, depth } => {
                deep_mlp_spec(shape.iter().product(), *width, *hidden, *depth, data.classes)
            }
            ArchSpec::ToyTransformer { dim, hidden, blocks } => {
                toy_transformer_spec(data.classes, shape[0], *dim, *hidden, *blocks)
            }
            ArchSpec::Custom { spec } => spec.clone(),
        })
    }
}

fn yes() -> bool {
    true
}

fn default_min_accuracy() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideConfig {
    pub arch: ArchSpec,
    /// `false` runs the untrained-guide protocol.
    #[serde(default = "yes")]
    pub train: bool,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    /// Validation accuracy below which a trained guide is flagged.
    #[serde(default = "default_min_accuracy")]
    pub min_val_accuracy: f64,
}

fn default_schedules() -> Vec<ScheduleKind> {
    vec![ScheduleKind::Progressive]
}

fn default_passes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionSection {
    #[serde(default = "default_schedules")]
    pub schedules: Vec<ScheduleKind>,
    #[serde(default)]
    pub reverse: bool,
    #[serde(default)]
    pub group_size: Option<usize>,
    pub metric: MetricSpec,
    #[serde(flatten)]
    pub trainer: ConversionConfig,
    /// Shuffled passes over the training inputs for BN recalibration.
    #[serde(default = "default_passes")]
    pub recalibration_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    #[serde(default = "yes")]
    pub naive: bool,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
}

impl Default for Baselines {
    fn default() -> Self {
        Self {
            naive: true,
            distill: None,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub dataset: DatasetSpec,
    pub guide: GuideConfig,
    pub mapping: MappingSpec,
    pub conversion: ConversionSection,
    /// Fine-tuning of converted targets and training of the naive baseline.
    pub task: TrainConfig,
    #[serde(default)]
    pub baselines: Baselines,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file and applies `THESEUS_SEED` / `THESEUS_OUT`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Ok(s) = std::env::var("THESEUS_SEED") {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("THESEUS_SEED={s:?} is not an integer")))?;
            c.seeds = vec![seed];
        }
        if let Ok(o) = std::env::var("THESEUS_OUT") {
            c.output = PathBuf::from(o);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.conversion.schedules.is_empty() {
            return Err(HarnessError::Config("at least one schedule is required".into()));
        }
        if self.guide.train && self.guide.training.is_none() {
            return Err(HarnessError::Config("a trained guide needs [guide.training]".into()));
        }
        Ok(())
    }
}
