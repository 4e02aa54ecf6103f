//! Versioned experiment description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::dedup::DEFAULT_THRESHOLDS;
use crate::error::{invalid, Result};
use crate::model::dual::DualEncoderArch;
use crate::model::zeroshot::DEFAULT_TEMPLATES;
use crate::model::{Arch, TrainConfig};
use crate::promptsearch::SearchConfig;
use crate::shiftgen::{CorruptionKind, SequenceKind, ShapeKind, ShiftVariant, CIFAR_STYLE_COORDS};

pub const CONFIG_VERSION: u32 = 1;

/// Everything one run needs. Seeds inside nested sections are replaced by
/// seeds derived from the master `seed` and the stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Threads per stage; results never depend on it.
    #[serde(default = "one", skip_serializing)]
    pub workers: usize,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub classifier: ModelConfig,
    /// Extra supervised models that only feed the baseline trend.
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineConfig>,
    #[serde(default)]
    pub dual_encoder: DualConfig,
    #[serde(default)]
    pub prompt_search: Option<SearchConfig>,
    #[serde(default)]
    pub typographic: Option<TypographicStage>,
    #[serde(default)]
    pub corruptions: Option<CorruptionStage>,
    #[serde(default)]
    pub stability: Option<StabilityStage>,
    #[serde(default)]
    pub attacks: Option<AttackStage>,
    #[serde(default)]
    pub dedup: Option<DedupStage>,
    #[serde(default)]
    pub report: ReportConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated toy shapes; every shift variant becomes a shifted test set.
    Toy {
        #[serde(default = "all_shapes")]
        classes: Vec<ShapeKind>,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_shifts")]
        shifts: Vec<ShiftVariant>,
    },
    /// Dataset directories written by this crate; shifts are `(name, dir)`.
    Directory {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        shifts: Vec<(String, PathBuf)>,
    },
}

fn all_shapes() -> Vec<ShapeKind> {
    ShapeKind::ALL.to_vec()
}
fn default_size() -> usize {
    32
}
fn default_train_per_class() -> usize {
    80
}
fn default_test_per_class() -> usize {
    30
}
fn default_shifts() -> Vec<ShiftVariant> {
    vec![ShiftVariant::Background, ShiftVariant::Texture]
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Toy {
            classes: all_shapes(),
            size: default_size(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            shifts: default_shifts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: Arch::default(), train: TrainConfig { epochs: 25, ..TrainConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub name: String,
    pub arch: Arch,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_baselines() -> Vec<BaselineConfig> {
    let epochs = |e| TrainConfig { epochs: e, ..TrainConfig::default() };
    vec![
        BaselineConfig { name: "linear-p4".into(), arch: Arch::Linear { pool: 4 }, train: epochs(4) },
        BaselineConfig { name: "linear-p2".into(), arch: Arch::Linear { pool: 2 }, train: epochs(15) },
        BaselineConfig { name: "mlp32-p4".into(), arch: Arch::Mlp { hidden: vec![32], pool: 4 }, train: epochs(10) },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    pub arch: DualEncoderArch,
    pub train: TrainConfig,
    /// Caption templates, `{}` standing for the class name. Also used as the
    /// hand-written prompt ensemble of the zero-shot classifier.
    pub templates: Vec<String>,
    /// Share of training images that carry a rendered class name and a
    /// caption naming that word instead of the shape.
    pub text_fraction: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            arch: DualEncoderArch::default(),
            train: TrainConfig { epochs: 30, batch_size: 32, learning_rate: 2e-3, ..TrainConfig::default() },
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            text_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TypographicStage {
    pub k_coords: usize,
    pub font_scale: Option<usize>,
}

impl Default for TypographicStage {
    fn default() -> Self {
        Self { k_coords: CIFAR_STYLE_COORDS, font_scale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionStage {
    pub kinds: Vec<CorruptionKind>,
    /// Leading test images used.
    pub samples: usize,
}

impl Default for CorruptionStage {
    fn default() -> Self {
        Self { kinds: CorruptionKind::ALL.to_vec(), samples: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityStage {
    pub kinds: Vec<SequenceKind>,
    pub length: usize,
    pub samples: usize,
}

impl Default for StabilityStage {
    fn default() -> Self {
        Self { kinds: SequenceKind::ALL.to_vec(), length: 5, samples: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackStage {
    pub configs: Vec<AttackConfig>,
    #[serde(default = "default_attack_samples")]
    pub samples: usize,
    /// When set, transferable methods also run from this model against every other one.
    #[serde(default)]
    pub transfer_source: Option<String>,
}

fn default_attack_samples() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderChoice {
    /// Image side of the trained dual encoder.
    DualEncoder,
    RandomProjection { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupStage {
    pub thresholds: Vec<f64>,
    pub embedder: EmbedderChoice,
}

impl Default for DedupStage {
    fn default() -> Self {
        Self { thresholds: DEFAULT_THRESHOLDS.to_vec(), embedder: EmbedderChoice::DualEncoder }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Scatter,
}

impl std::str::FromStr for ReportFormat {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "scatter" => Ok(ReportFormat::Scatter),
            other => Err(invalid(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub formats: Vec<ReportFormat>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Scatter] }
    }
}

impl ExperimentConfig {
    /// A config with every default and no optional stage.
    pub fn minimal(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "version": CONFIG_VERSION, "seed": seed })).expect("defaults are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be >= 1"));
        }
        if let DataSource::Toy { classes, train_per_class, test_per_class, .. } = &self.data {
            if classes.len() < 2 || *train_per_class == 0 || *test_per_class == 0 {
                return Err(invalid("toy data needs at least 2 classes and 1 image per class and split"));
            }
        }
        self.classifier.train.validate()?;
        let mut names: Vec<&str> = self.baselines.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(invalid("baseline names must be unique, non-empty and contain no path separators"));
        }
        for b in &self.baselines {
            b.train.validate()?;
        }
        self.dual_encoder.train.validate()?;
        if self.dual_encoder.templates.is_empty() {
            return Err(invalid("dual_encoder.templates is empty"));
        }
        if !(0.0..=1.0).contains(&self.dual_encoder.text_fraction) {
            return Err(invalid("dual_encoder.text_fraction must be in [0,1]"));
        }
        if let Some(p) = &self.prompt_search {
            if p.beam_size == 0 || p.top_k == 0 || p.ensemble_size == 0 || p.batch_size == 0 {
                return Err(invalid("prompt_search sizes must be positive"));
            }
        }
        if let Some(s) = &self.stability {
            if s.length < 2 || s.samples == 0 || s.kinds.is_empty() {
                return Err(invalid("stability needs length >= 2, samples >= 1 and at least one kind"));
            }
        }
        if let Some(c) = &self.corruptions {
            if c.samples == 0 || c.kinds.is_empty() {
                return Err(invalid("corruptions need samples >= 1 and at least one kind"));
            }
        }
        if let Some(a) = &self.attacks {
            if a.samples == 0 {
                return Err(invalid("attacks.samples must be >= 1"));
            }
            for c in &a.configs {
                c.validate()?;
            }
        }
        if let Some(d) = &self.dedup {
            let t = &d.thresholds;
            if t.is_empty() || t.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(invalid("dedup.thresholds must be non-empty and strictly ascending"));
            }
            if let EmbedderChoice::RandomProjection { dim: 0 } = d.embedder {
                return Err(invalid("random projection dim must be >= 1"));
            }
        }
        if self.report.formats.is_empty() {
            return Err(invalid("report.formats is empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::minimal(3);
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(c.attacks.is_none() && c.typographic.is_none());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"version":1,"sed":3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version":2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version":1,"dedup":{"thresholds":[0.9,0.8]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version":1,"classifier":{"train":{"epochs":2,"lr":1}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version":1,"attacks":{"configs":[{"method":"pgd"}]}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"version":1,"classifier":{"train":{"epochs":3}},"typographic":{}}"#).unwrap();
        assert_eq!(c.classifier.train.epochs, 3);
        assert_eq!(c.classifier.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.typographic.unwrap().k_coords, CIFAR_STYLE_COORDS);
    }
}
