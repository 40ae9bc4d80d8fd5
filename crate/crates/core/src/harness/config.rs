use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{SplitSpec, SynthParams};
use crate::nn::{ConvBlock, SgdConfig};
use crate::scenario::TumorOrder;
use crate::stain::{DomainSpec, StainMatrix};
use crate::strategy::{Regime, StrategyConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Full experiment description. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        classes: usize,
        per_class: usize,
        #[serde(default = "default_side")]
        side: u32,
        #[serde(default)]
        seed: u64,
    },
    /// `root/<class>/*.png`, or `root/domain_<k>/<class>/*.png` when
    /// `domains` is set.
    Folder {
        path: PathBuf,
        #[serde(default)]
        classes: Option<Vec<String>>,
        #[serde(default)]
        domains: bool,
    },
}

fn default_side() -> u32 {
    32
}

impl DataSource {
    pub fn synth(params: SynthParams) -> Self {
        DataSource::Synth {
            classes: params.classes,
            per_class: params.per_class,
            side: params.side,
            seed: params.seed,
        }
    }
}

/// Five-domain stain augmentation applied before splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "DomainSpec::presets")]
    pub domains: [DomainSpec; 5],
    #[serde(default)]
    pub stain_matrix: StainMatrix,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            seed: 0,
            domains: DomainSpec::presets(),
            stain_matrix: StainMatrix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Bilinear resize of every patch to `resize`×`resize`.
    #[serde(default)]
    pub resize: Option<u32>,
}

fn default_experiences() -> usize {
    5
}

fn default_domain_order() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

fn default_ratio() -> f64 {
    1.0
}

fn default_tumor_order() -> TumorOrder {
    TumorOrder::AFirst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    DataIl {
        #[serde(default = "default_experiences")]
        n_experiences: usize,
    },
    DomainIl {
        #[serde(default = "default_domain_order")]
        order: Vec<u8>,
    },
    /// `order` lists 1-based class numbers ("182736945"); identity if absent.
    ClassIl {
        #[serde(default)]
        order: Option<String>,
        grouping: String,
    },
    TaskIl {
        #[serde(default)]
        order: Option<String>,
        grouping: String,
    },
    /// Domain-IL over two tumor datasets: `data.source` is the first, `second`
    /// the other. When `positive_*` is given, that dataset is relabeled to
    /// non_tumor/tumor around the named class.
    TwoTumor {
        second: DataSource,
        #[serde(default)]
        positive_first: Option<String>,
        #[serde(default)]
        positive_second: Option<String>,
        #[serde(default = "default_tumor_order")]
        order: TumorOrder,
        #[serde(default = "default_ratio")]
        volume_ratio: f64,
    },
}

impl ScenarioConfig {
    pub fn needs_domains(&self) -> bool {
        matches!(self, ScenarioConfig::DataIl { .. } | ScenarioConfig::DomainIl { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: Vec<ConvBlock>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: vec![
                ConvBlock::new(16, true),
                ConvBlock::new(32, true),
                ConvBlock::new(64, false),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Offline epochs per experience; online regimes use one.
    pub epochs: usize,
    pub batch_size: usize,
    pub regime: Regime,
    pub sgd: SgdConfig,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            regime: Regime::Offline,
            sgd: SgdConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Save a checkpoint (model plus strategy memory) after every experience.
    pub checkpoints: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.train.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.train.seeds.is_empty() {
            return bad("train.seeds must list at least one seed".into());
        }
        self.train.sgd.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.data.split.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.strategy.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.blocks.is_empty() {
            return bad("model.blocks must not be empty".into());
        }
        if self.scenario.needs_domains()
            && self.data.augment.is_none()
            && !matches!(self.data.source, DataSource::Folder { domains: true, .. })
        {
            return bad("data_il and domain_il need data.augment or a domain folder".into());
        }
        if let ScenarioConfig::TwoTumor { volume_ratio, .. } = self.scenario {
            if !(volume_ratio.is_finite() && volume_ratio > 0.0) {
                return bad("scenario.volume_ratio must be positive".into());
            }
        }
        Ok(())
    }

    /// Regime after strategy overrides, and the epochs it implies.
    pub fn effective_regime(&self) -> (Regime, usize) {
        let forced = match self.strategy {
            StrategyConfig::Agem { .. } => Some(Regime::Online),
            StrategyConfig::Cope { .. } => Some(Regime::OnlineMini),
            _ => None,
        };
        let regime = forced.unwrap_or(self.train.regime);
        let epochs = if regime == Regime::Offline { self.train.epochs } else { 1 };
        (regime, epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"source": {"kind": "synth", "classes": 4, "per_class": 20}},
        "scenario": {"kind": "class_il", "grouping": "22"},
        "strategy": {"name": "finetune"}
    }"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.train.epochs, 15);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.sgd.lr, 0.1);
        assert_eq!(cfg.effective_regime(), (Regime::Offline, 15));
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for (from, to) in [
            ("\"strategy\"", "\"bogus\": 1, \"strategy\""),
            ("\"per_class\": 20", "\"per_class\": 20, \"colour\": 1"),
            ("\"grouping\": \"22\"", "\"grouping\": \"22\", \"x\": 0"),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert!(matches!(RunConfig::from_json(&text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn online_strategies_force_one_epoch() {
        let text = MINIMAL.replace("\"finetune\"", "\"cope\"");
        let cfg = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.effective_regime(), (Regime::OnlineMini, 1));
        let text = MINIMAL.replace("\"finetune\"", "\"agem\"");
        assert_eq!(RunConfig::from_json(&text).unwrap().effective_regime(), (Regime::Online, 1));
    }

    #[test]
    fn invalid_values() {
        let zero_batch = MINIMAL.replace("\"strategy\"", "\"train\": {\"batch_size\": 0}, \"strategy\"");
        assert!(RunConfig::from_json(&zero_batch).is_err());
        let domain = MINIMAL.replace("{\"kind\": \"class_il\", \"grouping\": \"22\"}", "{\"kind\": \"domain_il\"}");
        assert!(RunConfig::from_json(&domain).is_err());
    }
}
