use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::SyntheticSpec;
use super::HarnessError;
use crate::catalog::Tokenization;
use crate::objectives::HyperParams;
use crate::seqmodel::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Sft,
    Bear,
    PrefixRef,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Bear => "bear",
            Objective::PrefixRef => "prefix-ref",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sft" => Some(Objective::Sft),
            "bear" => Some(Objective::Bear),
            "prefix-ref" => Some(Objective::PrefixRef),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv { catalog: PathBuf, interactions: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub beam_width: usize,
    pub length_normalization: bool,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam_width: 10,
            length_normalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Label used in reports; defaults to the objective name.
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub tokenization: Tokenization,
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub decode: DecodeSettings,
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub window: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: DatasetSpec::default(),
            tokenization: Tokenization::Character,
            model: ModelConfig {
                embed_dim: 32,
                hidden_dim: 64,
                ..ModelConfig::default()
            },
            hyper: HyperParams::default(),
            decode: DecodeSettings::default(),
            objective: Objective::Sft,
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.005,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            seeds: vec![0, 1, 2],
            ks: vec![5, 10],
            window: 11,
            out_dir: PathBuf::from("bearlab-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn method(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.objective.name().to_string())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Validation(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be > 0 and momentum in [0, 1)");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be non-empty and positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.decode.beam_width == 0 {
            return bad("beam width must be at least 1");
        }
        self.hyper
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    /// Identifies the data-affecting part of the config.
    pub fn dataset_digest(&self) -> String {
        let v = serde_json::json!({
            "dataset": self.dataset,
            "tokenization": self.tokenization,
            "window": self.window,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let v = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(v.as_bytes()))
    }
}
