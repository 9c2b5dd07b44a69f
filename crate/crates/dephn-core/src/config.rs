//! Run configuration: a flat TOML file mirroring every training knob, plus
//! a stable content hash embedded in all emitted artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::{BankConfig, CrossMode, PrivateExpertKind};
use crate::feature::{FieldSchema, SsgGranularity};
use crate::model::{CombineMode, GatingMode, Mapping, MappingSet, ModelConfig, ModelKind};
use crate::vgrad::{CoefficientFunction, SimilarityMeasure};

/// Everything one training run depends on. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Dataset CSV path; the manifest sits next to it.
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,

    pub gating: GatingMode,
    pub similarity: SimilarityMeasure,
    pub coefficient: CoefficientFunction,
    pub mappings: Vec<Mapping>,
    pub combine: CombineMode,
    /// Gradient modulation of the gate table during training.
    pub virtual_gradient: bool,

    pub embed_dim: usize,
    pub heads: usize,
    pub ssg: SsgGranularity,
    pub expert_dim: usize,
    pub public_experts: usize,
    pub dnn_hidden: Vec<usize>,
    pub cross_depth: usize,
    pub field_depth: usize,
    pub cross_mode: CrossMode,
    pub private_experts: Vec<PrivateExpertKind>,
    pub tower_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Dephn,
            dataset: String::new(),
            epochs: 5,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 7,
            validation_fraction: 0.1,
            gating: GatingMode::Tvg,
            similarity: SimilarityMeasure::AbsPearson,
            coefficient: CoefficientFunction::AddSqrt,
            mappings: MappingSet::default().0,
            combine: CombineMode::LogitSum,
            virtual_gradient: true,
            embed_dim: 8,
            heads: 2,
            ssg: SsgGranularity::PerCoordinate,
            expert_dim: 16,
            public_experts: 3,
            dnn_hidden: vec![64, 32],
            cross_depth: 2,
            field_depth: 2,
            cross_mode: CrossMode::Dcnv2,
            private_experts: vec![PrivateExpertKind::Cross, PrivateExpertKind::Field],
            tower_hidden: vec![],
        }
    }
}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.mappings.is_empty() {
            return Err(Error::Config("mappings must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex chars of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Paths of the manifest and confidence sidecar next to the dataset.
    pub fn manifest_path(&self) -> PathBuf {
        Path::new(&self.dataset).with_extension("manifest.toml")
    }

    pub fn confidences_path(&self) -> PathBuf {
        Path::new(&self.dataset).with_extension("confidences.csv")
    }

    /// Resolves the architecture for a dataset's field layout. The
    /// attention + heterogeneous-expert kinds interpret the gating and
    /// mapping knobs; the MTPHN ablation pins identity mapping with
    /// softmax gating.
    pub fn model_config(&self, cardinalities: Vec<usize>, task_count: usize) -> ModelConfig {
        let (mappings, gating) = match self.model {
            ModelKind::Mtphn => (MappingSet::identity_only(), GatingMode::Mg),
            ModelKind::Dephn => (MappingSet(self.mappings.clone()), self.gating),
            ModelKind::Dnn | ModelKind::MmoeLite => {
                (MappingSet::identity_only(), self.gating)
            }
        };
        ModelConfig {
            kind: self.model,
            task_count,
            schema: FieldSchema { cardinalities, embed_dim: self.embed_dim },
            heads: self.heads,
            ssg: self.ssg,
            bank: BankConfig {
                public_experts: self.public_experts,
                dnn_hidden: self.dnn_hidden.clone(),
                expert_dim: self.expert_dim,
                cross_depth: self.cross_depth,
                field_depth: self.field_depth,
                cross_mode: self.cross_mode,
                private_experts: self.private_experts.clone(),
            },
            mappings,
            gating,
            combine: self.combine,
            tower_hidden: self.tower_hidden.clone(),
        }
    }
}
