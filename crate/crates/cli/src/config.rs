//! Run configuration: one TOML file with strict sections.

use std::path::Path;

use migc_bench::{BenchmarkSpec, CorpusSpec, EvalConfig};
use migc_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the model's initial weights.
    pub seed: u64,
    pub model: ModelConfig,
    /// Stage-0 backbone training.
    pub pretrain: TrainConfig,
    /// MIGC training with the backbone frozen.
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub bench: BenchmarkSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                epochs: 8,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                epochs: 3,
                ..TrainConfig::default()
            },
            corpus: CorpusSpec::default(),
            bench: BenchmarkSpec::default(),
            // sampled shapes are rough at 32 px; the shape check only screens blobs
            eval: {
                let mut e = EvalConfig::default();
                e.detector.shape_tolerance = 0.45;
                e
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        self.eval.validate()?;
        if self.bench.resolution != self.model.resolution {
            return Err(CliError::Config(format!(
                "bench.resolution {} differs from model.resolution {}",
                self.bench.resolution, self.model.resolution
            )));
        }
        if self.corpus.size == 0 {
            return Err(CliError::Config("corpus.size must be positive".into()));
        }
        if self.corpus.max_instances > self.model.max_num {
            return Err(CliError::Config(format!(
                "corpus.max_instances {} exceeds model.max_num {}",
                self.corpus.max_instances, self.model.max_num
            )));
        }
        if self.bench.levels.iter().any(|&l| l > self.model.max_num) {
            return Err(CliError::Config("a bench level exceeds model.max_num".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
