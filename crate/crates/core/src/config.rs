//! Experiment configuration, read from TOML.
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//!
//! [model]
//! layers = 2
//! hidden_dim = 32
//! head = "node-classification"   # edge-classification | link-prediction
//! pair_rule = "concat"           # symmetric
//!
//! [training]
//! window = 3
//! epochs = 100
//! learning_rate = 0.01
//! rho1 = 0.6
//! rho2 = 0.8
//!
//! [augment]
//! ratio = 0.3
//! mode = "verbatim"              # weighted
//!
//! [detect]
//! threshold = 0.5
//! aggregation = "mean"           # max
//!
//! [ood]
//! kind = "sm"                    # fi
//!
//! [splits]
//! train = 6
//! val = 3
//! test = 3
//! ```
//!
//! Every field has a default; an empty file (plus `schema_version`) is a
//! valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edl::DEFAULT_LOGIT_CLAMP;
use crate::encoder::{HeadKind, ModelConfig, PairRule};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{Aggregation, DEFAULT_THRESHOLD};
use crate::oodgen::{OodKind, SbmSpec};
use crate::spectral::AugmentMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub head: HeadKind,
    pub pair_rule: PairRule,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 32,
            head: HeadKind::NodeClassification,
            pair_rule: PairRule::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Snapshots per window (Δt).
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Heavy-ball momentum for SGD.
    pub momentum: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Coefficient of the evidential cross-entropy; 0 only in ablations.
    pub ce_weight: f64,
    /// Linear ramp of ρ₁ over this many epochs; 0 applies it from the start.
    pub kl_warmup_epochs: usize,
    pub logit_clamp: f64,
    /// Sampled non-edges per positive edge for link prediction.
    pub link_negatives: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            window: 3,
            epochs: 100,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            grad_clip: 5.0,
            rho1: 0.6,
            rho2: 0.8,
            ce_weight: 1.0,
            kl_warmup_epochs: 0,
            logit_clamp: DEFAULT_LOGIT_CLAMP,
            link_negatives: 1,
        }
    }
}

impl TrainingSection {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ce: self.ce_weight,
            rho1: self.rho1,
            rho2: self.rho2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Preservation ratio r.
    pub ratio: f64,
    pub mode: AugmentMode,
    /// Node count above which only half the spectrum is computed.
    pub large_n_threshold: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            ratio: 0.3,
            mode: AugmentMode::Verbatim,
            large_n_threshold: crate::spectral::DEFAULT_LARGE_N_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Score individual targets instead of whole windows.
    pub per_node: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::Mean,
            per_node: false,
        }
    }
}

/// Timestep counts of the temporal split, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 6,
            val: 3,
            test: 3,
        }
    }
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn train_range(&self) -> (usize, usize) {
        (0, self.train)
    }

    pub fn val_range(&self) -> (usize, usize) {
        (self.train, self.train + self.val)
    }

    pub fn test_range(&self) -> (usize, usize) {
        (self.train + self.val, self.total())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Sequence directory in the on-disk sequence format.
    pub sequence: Option<PathBuf>,
    /// Optional separate ID test sequence; defaults to the test split.
    pub id_test: Option<PathBuf>,
    /// Optional OOD test sequence; generated from the ID test set when absent.
    pub ood_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub augment: AugmentSection,
    pub detect: DetectSection,
    pub ood: OodKind,
    pub splits: Splits,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            training: TrainingSection::default(),
            augment: AugmentSection::default(),
            detect: DetectSection::default(),
            ood: OodKind::Sm(SbmSpec::default()),
            splits: Splits::default(),
            data: DataSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let t = &self.training;
        if t.window == 0 {
            return bad("training.window must be at least 1".into());
        }
        if self.model.layers == 0 || self.model.hidden_dim == 0 {
            return bad("model.layers and model.hidden_dim must be positive".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("training.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad(format!("training.momentum must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.grad_clip >= 0.0) {
            return bad("training.grad_clip must be nonnegative".into());
        }
        t.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(t.logit_clamp > 0.0) {
            return bad("training.logit_clamp must be positive".into());
        }
        if !(0.0..1.0).contains(&self.augment.ratio) {
            return bad(format!("augment.ratio must lie in [0, 1), got {}", self.augment.ratio));
        }
        if self.splits.train < t.window {
            return bad(format!(
                "the training split ({} timesteps) is shorter than one window ({})",
                self.splits.train, t.window
            ));
        }
        Ok(())
    }

    /// Encoder shape for data with the given feature width and class count.
    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: vec![self.model.hidden_dim; self.model.layers],
            num_classes,
            head: self.model.head,
            pair_rule: self.model.pair_rule,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
