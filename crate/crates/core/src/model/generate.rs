//! Incremental decoding with a key/value cache and per-slot vocabulary
//! constraints.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::net::{attend, gelu, log_sum_exp, mm, rms_norm};
use super::{Model, ModelError};
use crate::codecs::{Dims, TokenSpace};
use crate::prompt::{self, TaskInstance};
use crate::rng;
use crate::sampler::{SamplerError, SequenceScorer};
use crate::vocab::ModalityKind;

/// Per-layer keys and values of every position decoded so far.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Which tokens may be emitted at each generated position.
#[derive(Debug, Clone, Copy)]
pub enum Constraint<'a> {
    Unconstrained,
    /// Global ids of the slot at each payload position of `kind`/`dims`.
    Payload {
        space: &'a TokenSpace,
        kind: ModalityKind,
        dims: Dims,
    },
}

impl Constraint<'_> {
    pub fn allowed(&self, pos: usize, vocab: usize) -> Result<Range<u32>, ModelError> {
        match *self {
            Constraint::Unconstrained => Ok(0..vocab as u32),
            Constraint::Payload { space, kind, dims } => Ok(space.allowed(kind, dims, pos)?),
        }
    }
}

impl Model {
    /// Runs the prompt as a fully visible prefix; returns the cache and the
    /// logits predicting the first generated token.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache, Vec<f64>), ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::InvalidPrefix {
                prefix_len: 0,
                total_len: 0,
            });
        }
        let (out, cache) = self.forward_cached(prompt, prompt.len(), &[prompt.len() - 1])?;
        let n = self.config.num_layers;
        let (keys, values) = (0..n)
            .map(|l| {
                let (k, v) = cache.kv(l);
                (k.to_vec(), v.to_vec())
            })
            .unzip();
        Ok((
            KvCache {
                keys,
                values,
                len: prompt.len(),
            },
            out.logits,
        ))
    }

    /// Appends `token` at the next position; returns the logits predicting
    /// the token after it.
    pub fn step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f64>, ModelError> {
        self.check_tokens(&[token])?;
        let c = &self.config;
        let pos = cache.len;
        if pos >= c.max_context {
            return Err(ModelError::ContextOverflow {
                len: pos + 1,
                max: c.max_context,
            });
        }
        let (d, m) = (c.embed_dim, c.mlp_dim);
        let p = &self.params;
        let lay = &self.layout;
        let mut x: Vec<f64> = p[lay.tok + token as usize * d..][..d]
            .iter()
            .zip(&p[lay.pos + pos * d..][..d])
            .map(|(a, b)| a + b)
            .collect();
        for (li, l) in lay.layers.iter().enumerate() {
            let (h1, _, _) = rms_norm(&x, &p[l.ln1..l.ln1 + d], d);
            let q = mm(&h1, &p[l.wq..l.wq + d * d], 1, d, d);
            cache.keys[li].extend(mm(&h1, &p[l.wk..l.wk + d * d], 1, d, d));
            cache.values[li].extend(mm(&h1, &p[l.wv..l.wv + d * d], 1, d, d));
            let mut o = vec![0.0; d];
            attend(
                &q,
                &cache.keys[li],
                &cache.values[li],
                pos + 1,
                c.num_heads,
                c.head_dim(),
                &mut o,
                None,
            );
            let attn = mm(&o, &p[l.wo..l.wo + d * d], 1, d, d);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let (h2, _, _) = rms_norm(&x, &p[l.ln2..l.ln2 + d], d);
            let u = mm(&h2, &p[l.w1..l.w1 + d * m], 1, d, m);
            let a: Vec<f64> = u.iter().zip(&p[l.b1..l.b1 + m]).map(|(u, b)| gelu(u + b)).collect();
            let mlp = mm(&a, &p[l.w2..l.w2 + m * d], 1, m, d);
            for (cidx, xv) in x.iter_mut().enumerate() {
                *xv += mlp[cidx] + p[l.b2 + cidx];
            }
        }
        cache.len += 1;
        let (hf, _, _) = rms_norm(&x, &p[lay.lnf..lay.lnf + d], d);
        Ok(self.project(&hf))
    }

    /// Generates `n` tokens after `prompt`. Temperature 0 is greedy (ties
    /// go to the lowest id); otherwise tokens are drawn from the tempered
    /// softmax restricted to the allowed ids, seeded by `seed`.
    pub fn generate(
        &self,
        prompt: &[u32],
        n: usize,
        constraint: &Constraint,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<u32>, ModelError> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(ModelError::InvalidConfig(format!("temperature {temperature}")));
        }
        if prompt.len() + n > self.config.max_context + 1 {
            return Err(ModelError::ContextOverflow {
                len: prompt.len() + n,
                max: self.config.max_context,
            });
        }
        let mut g = rng::seeded(seed);
        let (mut cache, mut logits) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let allowed = constraint.allowed(i, self.config.vocab_size)?;
            let row = &logits[allowed.start as usize..allowed.end as usize];
            let pick = if temperature == 0.0 {
                argmax(row)
            } else {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|z| libm::exp((z - max) / temperature)).collect();
                match WeightedIndex::new(&w) {
                    Ok(dist) => dist.sample(&mut g),
                    Err(_) => argmax(row),
                }
            };
            let tok = allowed.start + pick as u32;
            out.push(tok);
            if i + 1 < n {
                logits = self.step(&mut cache, tok)?;
            }
        }
        Ok(out)
    }

    /// Generates the output payload of `inst` (any payload it carries is
    /// ignored), as global ids.
    pub fn generate_output(
        &self,
        inst: &TaskInstance,
        space: &TokenSpace,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<u32>, ModelError> {
        let query = inst.as_inference();
        let ser = prompt::serialize(&query, space)?;
        let n = query.expected_output_len(space)?;
        let constraint = Constraint::Payload {
            space,
            kind: query.output.kind,
            dims: query.output_dims,
        };
        self.generate(&ser.tokens, n, &constraint, temperature, seed)
    }

    /// Mean NLL of the output payload of `inst` (which must carry one).
    pub fn instance_loss(&self, inst: &TaskInstance, space: &TokenSpace) -> Result<f64, ModelError> {
        let ser = prompt::serialize(inst, space)?;
        self.loss(&ser.tokens, (ser.prefix_len, ser.tokens.len()))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best
}

impl SequenceScorer for Model {
    fn target_nll(&self, tokens: &[u32], span: (usize, usize)) -> Result<Vec<f64>, SamplerError> {
        Model::target_nll(self, tokens, span).map_err(|e| SamplerError::Scorer(format!("{e}")))
    }
}

/// Log-probabilities of a logits row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| z - lse).collect()
}
