//! Perplexity-weighted task sampling and fixed-budget window packing.

use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::Serialized;
use crate::rng::{self, Rng};
use crate::tasks::Registry;

pub const DEFAULT_BUDGET: usize = 8192;
/// Lower clamp on raw weights so that tasks with perplexity 1 stay
/// reachable.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("task {index} has perplexity {value}, must be >= 1")]
    InvalidPerplexity { index: usize, value: f64 },
    #[error("stats cover {got} tasks, expected {expected}")]
    IncompleteStats { expected: usize, got: usize },
    #[error("output count of task {0} must be >= 1")]
    InvalidCount(usize),
    #[error("instance {index} has {len} tokens, over the {budget}-token budget")]
    InstanceTooLarge { index: usize, len: usize, budget: usize },
    #[error("no target tokens to score")]
    NoTargetTokens,
    #[error("scorer failed: {0}")]
    Scorer(String),
}

/// Per-task perplexity and the number of tasks sharing its output modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub perplexity: Vec<f64>,
    pub output_count: Vec<usize>,
}

impl TaskStats {
    pub fn from_registry(registry: &Registry, perplexity: Vec<f64>) -> Result<Self, SamplerError> {
        if perplexity.len() != registry.len() {
            return Err(SamplerError::IncompleteStats {
                expected: registry.len(),
                got: perplexity.len(),
            });
        }
        Ok(Self {
            perplexity,
            output_count: (0..registry.len()).map(|i| registry.output_count(i)).collect(),
        })
    }

    /// Equal perplexity everywhere, as for a uniform baseline.
    pub fn uniform(registry: &Registry, perplexity: f64) -> Self {
        Self {
            perplexity: alloc::vec![perplexity; registry.len()],
            output_count: (0..registry.len()).map(|i| registry.output_count(i)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerWeights {
    pub raw: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `S(i) = ln(p_i) / N_m(i)`, clamped below at [`WEIGHT_FLOOR`] and
/// normalized.
pub fn compute_weights(stats: &TaskStats) -> Result<SamplerWeights, SamplerError> {
    if stats.perplexity.len() != stats.output_count.len() {
        return Err(SamplerError::IncompleteStats {
            expected: stats.output_count.len(),
            got: stats.perplexity.len(),
        });
    }
    if stats.perplexity.is_empty() {
        return Err(SamplerError::IncompleteStats { expected: 1, got: 0 });
    }
    let mut raw = Vec::with_capacity(stats.perplexity.len());
    for (i, (&p, &n)) in stats.perplexity.iter().zip(&stats.output_count).enumerate() {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(SamplerError::InvalidPerplexity { index: i, value: p });
        }
        if n == 0 {
            return Err(SamplerError::InvalidCount(i));
        }
        raw.push((libm::log(p) / n as f64).max(WEIGHT_FLOOR));
    }
    let total: f64 = raw.iter().sum();
    let probs = raw.iter().map(|w| w / total).collect();
    Ok(SamplerWeights { raw, probs })
}

/// `n` categorical draws with replacement.
pub fn sample_tasks_with(weights: &SamplerWeights, n: usize, rng: &mut Rng) -> Vec<usize> {
    let dist = WeightedIndex::new(&weights.probs).expect("normalized weights are positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn sample_tasks(weights: &SamplerWeights, n: usize, seed: u64) -> Vec<usize> {
    sample_tasks_with(weights, n, &mut rng::seeded(seed))
}

/// Placement of one instance inside a window. `target` is absolute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSpan {
    pub offset: usize,
    pub len: usize,
    pub prefix_len: usize,
    pub target: (usize, usize),
}

impl PackedSpan {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWindow {
    pub tokens: Vec<u32>,
    pub spans: Vec<PackedSpan>,
    pub budget: usize,
}

impl PackedWindow {
    pub fn used(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn padding(&self) -> usize {
        self.budget - self.used()
    }

    pub fn instance_tokens(&self, i: usize) -> &[u32] {
        &self.tokens[self.spans[i].range()]
    }
}

/// Incremental first-fit packing. Instances are appended in arrival order;
/// one that no longer fits is skipped, never truncated.
#[derive(Debug, Clone)]
pub struct WindowBuilder {
    budget: usize,
    pad_id: u32,
    tokens: Vec<u32>,
    spans: Vec<PackedSpan>,
}

impl WindowBuilder {
    pub fn new(budget: usize, pad_id: u32) -> Self {
        Self {
            budget,
            pad_id,
            tokens: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.tokens.len()
    }

    /// `Ok(true)` if packed, `Ok(false)` if skipped for lack of room.
    pub fn push(&mut self, index: usize, inst: &Serialized) -> Result<bool, SamplerError> {
        let len = inst.tokens.len();
        if len > self.budget {
            return Err(SamplerError::InstanceTooLarge {
                index,
                len,
                budget: self.budget,
            });
        }
        if len > self.remaining() {
            return Ok(false);
        }
        let offset = self.tokens.len();
        self.tokens.extend_from_slice(&inst.tokens);
        self.spans.push(PackedSpan {
            offset,
            len,
            prefix_len: inst.prefix_len,
            target: (offset + inst.prefix_len, offset + len),
        });
        Ok(true)
    }

    pub fn finish(mut self) -> PackedWindow {
        self.tokens.resize(self.budget, self.pad_id);
        PackedWindow {
            tokens: self.tokens,
            spans: self.spans,
            budget: self.budget,
        }
    }
}

/// Greedy first-fit over `instances` in order. Over-budget instances are
/// reported and skipped.
pub fn pack_window(instances: &[Serialized], budget: usize, pad_id: u32) -> (PackedWindow, Vec<SamplerError>) {
    let mut b = WindowBuilder::new(budget, pad_id);
    let mut rejected = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if let Err(e) = b.push(i, inst) {
            rejected.push(e);
        }
    }
    (b.finish(), rejected)
}

/// Draws instances from `next` until the window rejects two in a row, then
/// pads. Returns the window and the draw indices that were packed.
pub fn fill_window(
    mut next: impl FnMut() -> Serialized,
    budget: usize,
    pad_id: u32,
) -> (PackedWindow, Vec<usize>) {
    let mut b = WindowBuilder::new(budget, pad_id);
    let mut packed = Vec::new();
    let mut misses = 0;
    let mut draw = 0;
    while misses < 2 {
        let inst = next();
        match b.push(draw, &inst) {
            Ok(true) => {
                packed.push(draw);
                misses = 0;
            }
            _ => misses += 1,
        }
        draw += 1;
    }
    (b.finish(), packed)
}

/// Anything that can report per-token negative log-likelihoods of a
/// sequence's target span.
pub trait SequenceScorer {
    /// NLL of each token in `span`, predicted from everything before it.
    fn target_nll(&self, tokens: &[u32], span: (usize, usize)) -> Result<Vec<f64>, SamplerError>;
}

/// `exp` of the mean, over the first `n_samples` instances, of each
/// instance's mean target-token NLL.
pub fn estimate_perplexity(
    scorer: &impl SequenceScorer,
    instances: &[Serialized],
    n_samples: usize,
) -> Result<f64, SamplerError> {
    let take = n_samples.min(instances.len());
    if take == 0 {
        return Err(SamplerError::NoTargetTokens);
    }
    let mut total = 0.0;
    for inst in &instances[..take] {
        let span = (inst.prefix_len, inst.tokens.len());
        if span.0 >= span.1 {
            return Err(SamplerError::NoTargetTokens);
        }
        let nll = scorer.target_nll(&inst.tokens, span)?;
        total += nll.iter().sum::<f64>() / nll.len() as f64;
    }
    Ok(libm::exp(total / take as f64))
}
