//! Experiment configuration (TOML).
//!
//! Every field has a default, so an empty file is a valid configuration that
//! reproduces the reference setting for ICBHI; see `configs/` for variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::dsp::MelParams;
use crate::error::{Error, Result};
use crate::eval::SensitivityMode;
use crate::losses::LossConfig;
use crate::manifest::AgeScheme;
use crate::nn::{EncoderConfig, HeadSet, ModelConfig, ProjectorConfig};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Cross-entropy on the classifier head.
    Ce,
    /// Class-label contrastive pretraining, then a linear probe.
    Scl,
    /// Class and metadata contrastive heads, then a linear probe.
    Mscl,
    /// Joint cross-entropy and contrastive loss.
    Hybrid,
    /// Contrastive pretraining where only sibling views are positives.
    Simclr,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Ce, Regime::Scl, Regime::Mscl, Regime::Hybrid, Regime::Simclr];

    /// Regimes trained in two stages (contrastive, then probe).
    pub fn uses_probe(self) -> bool {
        matches!(self, Regime::Scl | Regime::Mscl | Regime::Simclr)
    }

    pub fn has_classifier(self) -> bool {
        matches!(self, Regime::Ce | Regime::Hybrid)
    }

    pub fn n_projectors(self) -> usize {
        match self {
            Regime::Ce => 0,
            Regime::Scl | Regime::Hybrid | Regime::Simclr => 1,
            Regime::Mscl => 2,
        }
    }

    /// Augmented views per sample in a training batch.
    pub fn views_per_sample(self, ce_views: usize) -> usize {
        match self {
            Regime::Ce => ce_views,
            _ => 2,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Ce => "ce",
            Regime::Scl => "scl",
            Regime::Mscl => "mscl",
            Regime::Hybrid => "hybrid",
            Regime::Simclr => "simclr",
        })
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Regime::ALL
            .into_iter()
            .find(|r| r.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown regime `{s}` (expected ce, scl, mscl, hybrid or simclr)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub normal_class: String,
    /// Defaults to the dataset's own age split.
    pub age_scheme: Option<AgeScheme>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            cache_dir: None,
            normal_class: "normal".into(),
            age_scheme: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub kind: Regime,
    pub probe_lr: f64,
    pub probe_epochs: usize,
    /// Falls back to `optimizer.batch_size`.
    pub probe_batch_size: Option<usize>,
    /// Augmented views per sample in the cross-entropy regime.
    pub ce_views: usize,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            kind: Regime::Scl,
            probe_lr: 0.1,
            probe_epochs: 50,
            probe_batch_size: None,
            ce_views: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sensitivity: SensitivityMode,
    /// Training patients held out to pick the reported epoch. 0 picks it on
    /// the test split.
    pub validation_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub mel: MelParams,
    pub augment: AugmentationPolicy,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub regime: RegimeConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].split('=').next().unwrap_or("").trim().to_string())
                .filter(|f| !f.is_empty())
                .unwrap_or_else(|| "<file>".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.model.encoder.validate()?;
        self.mel.validate().map_err(|e| Error::config("mel", e.to_string()))?;
        let p = &self.model.projector;
        if p.hidden_dim == 0 || p.out_dim == 0 {
            return Err(Error::config("model.projector", "dimensions must be positive"));
        }
        let r = &self.regime;
        if !(r.probe_lr > 0.0 && r.probe_lr.is_finite()) {
            return Err(Error::config("regime.probe_lr", "must be positive"));
        }
        if r.probe_epochs == 0 {
            return Err(Error::config("regime.probe_epochs", "must be at least 1"));
        }
        if r.probe_batch_size == Some(0) {
            return Err(Error::config("regime.probe_batch_size", "must be at least 1"));
        }
        if r.ce_views == 0 {
            return Err(Error::config("regime.ce_views", "must be at least 1"));
        }
        let heads = r.kind.n_projectors();
        if r.kind == Regime::Mscl && self.loss.lambdas.len() != heads {
            return Err(Error::config(
                "loss.lambdas",
                format!("mscl needs {heads} weights, got {}", self.loss.lambdas.len()),
            ));
        }
        let frames = self.mel.frame_count(self.mel.cycle_samples()).unwrap_or(0);
        let need = self.model.encoder.min_extent();
        if self.mel.n_mels < need || frames < need {
            return Err(Error::config(
                "mel",
                format!(
                    "{}×{frames} grid is smaller than the encoder minimum of {need}",
                    self.mel.n_mels
                ),
            ));
        }
        Ok(())
    }

    pub fn probe_batch_size(&self) -> usize {
        self.regime.probe_batch_size.unwrap_or(self.optimizer.batch_size)
    }

    /// Model graph for the configured regime.
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        let kind = self.regime.kind;
        ModelConfig {
            encoder: self.model.encoder.clone(),
            heads: HeadSet {
                n_classes: kind.has_classifier().then_some(n_classes),
                projectors: vec![self.model.projector.clone(); kind.n_projectors()],
            },
        }
    }

    /// Encoder with a classifier only: the graph evaluated after probing.
    pub fn probe_model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.model.encoder.clone(),
            heads: HeadSet {
                n_classes: Some(n_classes),
                projectors: Vec::new(),
            },
        }
    }
}
