use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, PretrainConfig, Task};
use crate::docdata::{ClassBalance, LabelScheme, SyntheticDomainSpec};
use crate::docmodel::{ModelConfig, LAYOUT_BUCKETS};
use crate::error::{Error, Result};

/// Task named in a run configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Entity,
    /// Key-value extraction; token classification over the configured scheme.
    Kv,
    Qa,
}

impl TaskKind {
    pub fn model_task(self) -> Task {
        match self {
            TaskKind::Entity | TaskKind::Kv => Task::Entity,
            TaskKind::Qa => Task::Qa,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Entity => "entity",
            TaskKind::Kv => "kv",
            TaskKind::Qa => "qa",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    #[default]
    Funsd,
    Sroie,
}

impl SchemeKind {
    pub fn scheme(self) -> LabelScheme {
        match self {
            SchemeKind::Funsd => LabelScheme::funsd(),
            SchemeKind::Sroie => LabelScheme::sroie(),
        }
    }
}

/// Encoder shape; vocabulary size and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub image_patches: usize,
    pub ffn_mult: usize,
    /// Upper bound on the corpus-built vocabulary.
    pub max_vocab: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            max_len: m.max_len,
            image_patches: m.image_patches,
            ffn_mult: m.ffn_mult,
            max_vocab: m.vocab_size,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            num_classes,
            layout_buckets: LAYOUT_BUCKETS,
            image_patches: self.image_patches,
            ffn_mult: self.ffn_mult,
        }
    }

    /// Side of the patch grid, or an error when `image_patches` is not square.
    pub fn patch_grid(&self) -> Result<usize> {
        let g = (self.image_patches as f64).sqrt().round() as usize;
        if g * g != self.image_patches {
            return Err(Error::Config(format!(
                "image_patches {} is not a square",
                self.image_patches
            )));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub source: SyntheticDomainSpec,
    pub target: SyntheticDomainSpec,
    /// Styles mixed into the unlabeled pretraining corpus.
    pub pretrain: Vec<SyntheticDomainSpec>,
    pub source_count: usize,
    pub target_count: usize,
    /// Documents per pretraining style.
    pub pretrain_count: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        let source = SyntheticDomainSpec {
            lexicon: 0,
            layout_density: 0.9,
            box_jitter: 3.0,
            fill_rate: 0.8,
            num_keys: 10,
            value_below_rate: 0.0,
            ink_noise: 0.0,
            ink_resolution: 64,
            class_balance: ClassBalance {
                header_lines: 1,
                filler_lines: 2,
            },
        };
        let target = SyntheticDomainSpec {
            lexicon: 1,
            layout_density: 0.4,
            box_jitter: 15.0,
            fill_rate: 0.6,
            num_keys: 10,
            value_below_rate: 0.5,
            ink_noise: 0.05,
            ink_resolution: 64,
            class_balance: ClassBalance {
                header_lines: 2,
                filler_lines: 4,
            },
        };
        let pretrain = (0..3)
            .map(|lexicon| SyntheticDomainSpec {
                lexicon,
                layout_density: 0.6,
                box_jitter: 8.0,
                fill_rate: 0.7,
                num_keys: 10,
                value_below_rate: 0.3,
                ink_noise: 0.02,
                ink_resolution: 64,
                class_balance: ClassBalance {
                    header_lines: 1,
                    filler_lines: 3,
                },
            })
            .collect();
        Self {
            source,
            target,
            pretrain,
            source_count: 220,
            target_count: 120,
            pretrain_count: 200,
        }
    }
}

/// FUNSD-format annotations plus split manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestData {
    pub dir: PathBuf,
    /// Directory holding `source_train.txt`, `source_val.txt` and `target.txt`.
    pub manifests: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticData>,
    pub ingest: Option<IngestData>,
    pub seed: u64,
    /// Fraction of source documents held out for validation.
    pub val_fraction: f64,
    pub scheme: SchemeKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticData::default()),
            ingest: None,
            seed: 0,
            val_fraction: 0.1,
            scheme: SchemeKind::Funsd,
        }
    }
}

/// Supervised source training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaCalibration {
    #[default]
    Start,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// QA calibration units: start positions, or start and end positions.
    pub qa_calibration: QaCalibration,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainSection,
    pub adapt: AdaptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Entity,
            qa_calibration: QaCalibration::Start,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig {
                epochs: 6,
                lr: 1e-3,
                weight_decay: 0.01,
                batch_size: 16,
                ..Default::default()
            },
            train: TrainSection::default(),
            adapt: AdaptConfig {
                epochs: 4,
                lr: 1e-4,
                ..Default::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
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
        match (&self.data.synthetic, &self.data.ingest) {
            (Some(s), None) => {
                s.source.validate()?;
                s.target.validate()?;
                for p in &s.pretrain {
                    p.validate()?;
                }
                if s.source_count < 2 || s.target_count == 0 {
                    return Err(Error::Config(
                        "synthetic corpora need ≥2 source and ≥1 target documents".into(),
                    ));
                }
            }
            (None, Some(i)) => {
                for p in [&i.dir, &i.manifests] {
                    if !p.exists() {
                        return Err(Error::Config(format!("path {} does not exist", p.display())));
                    }
                }
            }
            _ => {
                return Err(Error::Config(
                    "exactly one of data.synthetic / data.ingest must be set".into(),
                ))
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} not in [0, 1)",
                self.data.val_fraction
            )));
        }
        self.model.patch_grid()?;
        self.adapt.validate()?;
        self.model.build(16, 7).validate()
    }

    pub fn scheme(&self) -> LabelScheme {
        self.data.scheme.scheme()
    }
}
