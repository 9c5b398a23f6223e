//! A small prefix language model over the unified vocabulary, written out
//! by hand in double precision: forward pass, manual backpropagation,
//! AdamW training, KV-cached constrained generation and chain execution.
//!
//! Architecture: token plus learned absolute position embeddings, pre-RMSNorm
//! blocks (multi-head attention under a prefix mask, GELU MLP), a final
//! RMSNorm and an untied output projection with bias.

mod chain;
mod generate;
mod net;
mod train;

pub use chain::{run_chain, ChainOutput, ChainRenderer, NoRenderer};
pub use generate::{Constraint, KvCache};
pub use net::{span_cross_entropy, ForwardOutput, Gradients};
pub use generate::log_softmax;
pub use train::window_batch;
pub use train::{lr_at, Schedule, TrainConfig, TrainState};

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::CodecError;
use crate::prompt::PromptError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {0} is outside the vocabulary")]
    TokenOutOfVocab(u32),
    #[error("sequence of {len} tokens exceeds the {max}-token context")]
    ContextOverflow { len: usize, max: usize },
    #[error("prefix length {prefix_len} exceeds sequence length {total_len}")]
    InvalidPrefix { prefix_len: usize, total_len: usize },
    #[error("no target tokens")]
    NoTargetTokens,
    #[error("non-finite gradient; update skipped")]
    DivergedTraining,
    #[error("parameter vector has {got} values, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("chain step {step}")]
    Chain { step: usize, source: Box<ModelError> },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("render failed: {0}")]
    Render(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 128,
            max_context: 8192,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if self.num_layers == 0 || self.mlp_dim == 0 || self.max_context == 0 {
            return bad("num_layers, mlp_dim and max_context must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Attention pattern of a prefix LM: the first `prefix_len` positions see
/// each other, later positions see everything up to themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMask {
    pub total_len: usize,
    pub prefix_len: usize,
}

impl PrefixMask {
    pub fn new(prefix_len: usize, total_len: usize) -> Result<Self, ModelError> {
        if prefix_len > total_len {
            return Err(ModelError::InvalidPrefix { prefix_len, total_len });
        }
        Ok(Self { total_len, prefix_len })
    }

    /// Keys visible from `query` are exactly `0..key_end(query)`.
    #[inline]
    pub fn key_end(&self, query: usize) -> usize {
        if query < self.prefix_len {
            self.prefix_len
        } else {
            query + 1
        }
    }

    pub fn attends(&self, query: usize, key: usize) -> bool {
        key < self.key_end(query)
    }

    /// Row-major `total × total` attendance matrix.
    pub fn matrix(&self) -> Vec<bool> {
        let n = self.total_len;
        (0..n * n).map(|i| self.attends(i / n, i % n)).collect()
    }
}

pub fn prefix_mask(prefix_len: usize, total_len: usize) -> Result<PrefixMask, ModelError> {
    PrefixMask::new(prefix_len, total_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ParamLayout {
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf: usize,
    pub wout: usize,
    pub bout: usize,
    pub total: usize,
}

impl ParamLayout {
    fn new(c: &ModelConfig) -> Self {
        let (v, d, m) = (c.vocab_size, c.embed_dim, c.mlp_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(c.max_context * d);
        let layers = (0..c.num_layers)
            .map(|_| LayerOffsets {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                w1: take(d * m),
                b1: take(m),
                w2: take(m * d),
                b2: take(d),
            })
            .collect();
        let lnf = take(d);
        let wout = take(d * v);
        let bout = take(v);
        Self {
            tok,
            pos,
            layers,
            lnf,
            wout,
            bout,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Model {
    /// Seeded initialization: embeddings with std 0.1, matrices with std
    /// 1/sqrt(fan_in) (residual projections further scaled by
    /// 1/sqrt(2·layers)), norm gains 1, biases 0.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut p = vec![0.0; layout.total];
        let mut g = rng::seeded(config.seed);
        let (v, d, m) = (config.vocab_size, config.embed_dim, config.mlp_dim);
        let mut fill = |p: &mut [f64], std: f64| p.iter_mut().for_each(|x| *x = std * rng::normal(&mut g));
        fill(&mut p[layout.tok..layout.tok + v * d], 0.1);
        fill(&mut p[layout.pos..layout.pos + config.max_context * d], 0.1);
        let resid = 1.0 / libm::sqrt(2.0 * config.num_layers as f64);
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);
        for l in &layout.layers {
            p[l.ln1..l.ln1 + d].fill(1.0);
            p[l.ln2..l.ln2 + d].fill(1.0);
            for o in [l.wq, l.wk, l.wv] {
                fill(&mut p[o..o + d * d], inv(d));
            }
            fill(&mut p[l.wo..l.wo + d * d], inv(d) * resid);
            fill(&mut p[l.w1..l.w1 + d * m], inv(d));
            fill(&mut p[l.w2..l.w2 + m * d], inv(m) * resid);
        }
        p[layout.lnf..layout.lnf + d].fill(1.0);
        fill(&mut p[layout.wout..layout.wout + d * v], inv(d));
        Ok(Self {
            config,
            layout,
            params: p,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ParamCount {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Sets the output projection and bias to zero, making every softmax
    /// uniform.
    pub fn zero_output(&mut self) {
        let l = &self.layout;
        self.params[l.wout..l.bout + self.config.vocab_size].fill(0.0);
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_context {
            return Err(ModelError::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab(t));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        let m = prefix_mask(2, 4).unwrap();
        let seen = |q: usize| (0..4).filter(|&k| m.attends(q, k)).collect::<Vec<_>>();
        assert_eq!(seen(0), [0, 1]);
        assert_eq!(seen(1), [0, 1]);
        assert_eq!(seen(2), [0, 1, 2]);
        assert_eq!(seen(3), [0, 1, 2, 3]);
        let causal = prefix_mask(0, 5).unwrap();
        assert!((0..5).all(|q| (0..5).all(|k| causal.attends(q, k) == (k <= q))));
        let full = prefix_mask(5, 5).unwrap();
        assert!(full.matrix().iter().all(|&b| b));
        assert_eq!(
            prefix_mask(3, 2),
            Err(ModelError::InvalidPrefix {
                prefix_len: 3,
                total_len: 2
            })
        );
    }

    #[test]
    fn mask_invariant_exhaustive() {
        for total in 0..=32 {
            for p in 0..=total {
                let m = prefix_mask(p, total).unwrap().matrix();
                for q in 0..total {
                    for k in 0..total {
                        let want = if q < p { k < p } else { k <= q };
                        assert_eq!(m[q * total + k], want);
                    }
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        assert!(Model::new(c.clone()).is_ok());
        c.num_heads = 3;
        assert!(matches!(Model::new(c), Err(ModelError::InvalidConfig(_))));
    }
}
