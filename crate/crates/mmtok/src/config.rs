//! The run configuration: one JSON document with every knob and seed.
//! Unknown keys are rejected with an error naming the key.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmtok_core::model::{ModelConfig, Schedule, TrainConfig};
use mmtok_core::rng;
use mmtok_core::synth::WorldConfig;
use mmtok_core::{TokenSpace, TokenizerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub records: usize,
    /// Frames per clip; must be 1 mod 4.
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { records: 64, frames: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub iters: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { iters: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Tokens per packed window.
    pub window_budget: usize,
    pub windows: usize,
    /// Perplexity assumed for every task when no measured table is given.
    pub baseline_perplexity: f64,
    /// Instances scored per task by the perplexity command.
    pub perplexity_samples: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_budget: 2048,
            windows: 64,
            baseline_perplexity: 2.0,
            perplexity_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLoopConfig {
    pub optimizer: TrainConfig,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            optimizer: TrainConfig {
                schedule: Schedule {
                    peak_lr: 5e-3,
                    final_lr: 5e-4,
                    warmup_steps: 10,
                    total_steps: 200,
                },
                ..TrainConfig::default()
            },
            steps: 200,
            checkpoint_every: 50,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// 0 decodes greedily.
    pub temperature: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage draws its own stream from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    /// Codebook sizes; these also fix the vocabulary layout.
    pub tokenizer: TokenizerConfig,
    pub codecs: CodecTrainConfig,
    /// `vocab_size` 0 means "take it from the layout".
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainLoopConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::compact(),
            codecs: CodecTrainConfig::default(),
            model: ModelConfig {
                embed_dim: 32,
                num_layers: 2,
                num_heads: 4,
                mlp_dim: 64,
                max_context: 2048,
                ..ModelConfig::default()
            },
            sampler: SamplerConfig::default(),
            train: TrainLoopConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

/// Streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Codecs = 2,
    Sampler = 3,
    Model = 4,
    Generate = 5,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("invalid run config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Defaults when no path is given; `seed` overrides the root seed.
    pub fn resolve(path: Option<&PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        Ok(c)
    }

    pub fn seed_for(&self, s: Stream) -> u64 {
        rng::derive(self.seed, s as u64)
    }

    pub fn space(&self) -> Result<TokenSpace> {
        Ok(TokenSpace::new(self.tokenizer.clone())?)
    }

    /// The model config with the vocabulary size filled in and the seed
    /// drawn from the root seed.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = self.space()?.vocab_size();
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab;
        }
        anyhow::ensure!(
            m.vocab_size == vocab,
            "model.vocab_size {} does not match the layout's {vocab}",
            m.vocab_size
        );
        m.seed = self.seed_for(Stream::Model);
        Ok(m)
    }
}
