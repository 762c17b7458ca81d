//! The run configuration: one TOML file with a section per subsystem.
//! Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::eval::RetrievalDirection;
use crate::losses::LossConfig;
use crate::meta::MetaConfig;
use crate::model::{Activation, DomainTableSpec, DualEncoder, EncoderSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Meta,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TowerConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            hidden_dims: vec![64],
            activation: Activation::Tanh,
        }
    }
}

/// Encoder shapes. Input dims and the number of domains come from the
/// generator section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub domain_dim: usize,
    pub image: TowerConfig,
    pub text: TowerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            domain_dim: 16,
            image: TowerConfig::default(),
            text: TowerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub holdout_domains: Vec<usize>,
    pub ks: Vec<usize>,
    /// Evaluate held-out adaptation every this many iterations; 0 disables.
    pub every: usize,
    /// Tasks drawn per held-out domain; their reports are averaged.
    pub num_tasks: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub direction: RetrievalDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_domains: vec![4],
            ks: vec![0, 1, 3, 5],
            every: 0,
            num_tasks: 20,
            support_size: 16,
            query_size: 16,
            direction: RetrievalDirection::I2t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Run directory, relative to the output root unless absolute.
    pub out_dir: PathBuf,
    /// Dataset file, relative to the output root unless absolute.
    pub dataset: PathBuf,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: PathBuf::from("runs/default"),
            dataset: PathBuf::from("dataset.bin"),
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            mode: Mode::Meta,
            generator: GeneratorSpec::default(),
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The effective configuration, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of everything except the `io` section, so a run can be
    /// resumed into a different directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.io = IoConfig::default();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn model(&self) -> Result<DualEncoder> {
        let tower = |t: &TowerConfig, input_dim| EncoderSpec {
            input_dim,
            hidden_dims: t.hidden_dims.clone(),
            embed_dim: self.model.embed_dim,
            activation: t.activation,
        };
        DualEncoder::new(
            tower(&self.model.image, self.generator.image_dim),
            tower(&self.model.text, self.generator.text_dim),
            DomainTableSpec {
                num_domains: self.generator.num_domains,
                dim: self.model.domain_dim,
            },
        )
    }

    /// Domain ids used for training, ascending.
    pub fn train_domains(&self) -> Vec<usize> {
        (0..self.generator.num_domains)
            .filter(|d| !self.eval.holdout_domains.contains(d))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model()?;
        self.meta.validate()?;
        self.loss.validate()?;
        let g = &self.generator;
        let need = 2 * (self.meta.support_size + self.meta.query_size);
        if g.samples_per_domain < need {
            return Err(Error::Config(format!(
                "generator.samples_per_domain = {} but tasks need at least {need}",
                g.samples_per_domain
            )));
        }
        if self.meta.align_per_domain > g.samples_per_domain {
            return Err(Error::Config("meta.align_per_domain exceeds samples_per_domain".into()));
        }
        if let Some(d) = self.eval.holdout_domains.iter().find(|&&d| d >= g.num_domains) {
            return Err(Error::Config(format!("eval.holdout_domains: unknown domain {d}")));
        }
        if self.train_domains().is_empty() {
            return Err(Error::Config("eval.holdout_domains leaves no training domain".into()));
        }
        let ks = &self.eval.ks;
        if ks.first() != Some(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("eval.ks must be increasing and start at 0, got {ks:?}")));
        }
        if self.eval.num_tasks == 0 || self.eval.support_size == 0 || self.eval.query_size < 2 {
            return Err(Error::Config("eval.num_tasks, support_size must be positive and query_size >= 2".into()));
        }
        if self.eval.support_size + self.eval.query_size > g.samples_per_domain {
            return Err(Error::Config("eval task size exceeds samples_per_domain".into()));
        }
        Ok(())
    }
}
