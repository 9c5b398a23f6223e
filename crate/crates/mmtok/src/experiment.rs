//! Desk-scale training experiments: the copy task and the direct versus
//! chained speech → semantic comparison.

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use log::info;
use mmtok_core::codecs::{SemanticVideo, TokenSpace, TokenizerConfig};
use mmtok_core::model::{run_chain, Model, ModelConfig, NoRenderer, Schedule, TrainConfig, TrainState};
use mmtok_core::pipeline::{build_instance, Decoded, TokenizedRecord, Tokenizers};
use mmtok_core::prompt::{self, random_payload, ModalityRef, Segment, Serialized, TaskInstance};
use mmtok_core::rng;
use mmtok_core::sampler::{estimate_perplexity, fill_window};
use mmtok_core::synth::{ambiguous_task_dataset, AvatarWorld, SampleRecord, WorldConfig};
use mmtok_core::tasks::{plan_chain, Registry, Strategy, Target, TaskSpec};
use mmtok_core::vocab::{ModalityKind, PAD_ID};
use mmtok_core::Dims;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::trainer::{thread_pool, train_window};

fn model_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: 32,
        num_layers: 2,
        num_heads: 4,
        mlp_dim: 64,
        max_context: 512,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopyTaskConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub eval_instances: usize,
    pub target_accuracy: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        let space = TokenSpace::new(TokenizerConfig::compact()).expect("compact layout");
        Self {
            model: model_config(space.vocab_size(), 7),
            train: TrainConfig {
                schedule: Schedule {
                    peak_lr: 1e-2,
                    final_lr: 1e-3,
                    warmup_steps: 50,
                    total_steps: 2000,
                },
                ..TrainConfig::default()
            },
            max_steps: 2000,
            batch: 16,
            eval_every: 100,
            eval_instances: 200,
            target_accuracy: 0.99,
            seed: 1,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyTaskReport {
    pub steps: usize,
    pub accuracy: f64,
    pub final_loss: f64,
    /// `(step, mean loss, held-out token accuracy)` at each evaluation.
    pub history: Vec<(usize, f64, f64)>,
}

/// Past speech → current speech with identical tokens: 8 frames × 2
/// levels = 16 payload tokens under the compact layout.
fn copy_instance(space: &TokenSpace, g: &mut rng::Rng) -> Result<TaskInstance> {
    let dims = Dims::Frames { frames: 8 };
    let payload = random_payload(space, ModalityKind::Speech, dims, g)?;
    Ok(TaskInstance {
        conditions: vec![Segment {
            modality: ModalityRef::past(ModalityKind::Speech),
            dims,
            payload: payload.clone(),
        }],
        output: ModalityRef::current(ModalityKind::Speech),
        output_dims: dims,
        output_payload: payload,
    })
}

pub fn run_copy_task(cfg: &CopyTaskConfig) -> Result<CopyTaskReport> {
    let space = TokenSpace::new(TokenizerConfig::compact())?;
    ensure!(cfg.model.vocab_size == space.vocab_size(), "model vocab must match the compact layout");
    let pool = thread_pool(cfg.threads);
    let mut model = Model::new(cfg.model.clone())?;
    let mut state = TrainState::new(&model, cfg.train.clone());
    let mut g = rng::seeded(rng::derive(cfg.seed, 1));
    let mut eg = rng::seeded(rng::derive(cfg.seed, 2));
    let eval: Vec<TaskInstance> = (0..cfg.eval_instances)
        .map(|_| copy_instance(&space, &mut eg))
        .collect::<Result<_>>()?;
    let mut report = CopyTaskReport {
        steps: 0,
        accuracy: 0.0,
        final_loss: f64::NAN,
        history: Vec::new(),
    };
    let mut recent = Vec::new();
    for step in 1..=cfg.max_steps {
        let batch: Vec<Serialized> = (0..cfg.batch)
            .map(|_| Ok(prompt::serialize(&copy_instance(&space, &mut g)?, &space)?))
            .collect::<Result<_>>()?;
        let budget: usize = batch.iter().map(|s| s.tokens.len()).sum();
        let mut it = batch.into_iter();
        let (window, _) = fill_window(
            || it.next().unwrap_or(Serialized { tokens: vec![0; budget + 1], prefix_len: 0 }),
            budget,
            PAD_ID,
        );
        let loss = train_window(&pool, &mut model, &mut state, &window)? / cfg.batch as f64;
        recent.push(loss);
        report.steps = step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let acc = copy_accuracy(&pool, &model, &space, &eval)?;
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            info!("copy step {step}: loss {mean:.4}, accuracy {acc:.4}");
            report.history.push((step, mean, acc));
            report.accuracy = acc;
            report.final_loss = mean;
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }
    Ok(report)
}

fn copy_accuracy(pool: &rayon::ThreadPool, model: &Model, space: &TokenSpace, eval: &[TaskInstance]) -> Result<f64> {
    let hits: Vec<usize> = pool.install(|| {
        eval.par_iter()
            .map(|inst| {
                let out = model.generate_output(inst, space, 0.0, 0)?;
                Ok(out.iter().zip(&inst.output_payload).filter(|(a, b)| a == b).count())
            })
            .collect::<Result<_>>()
    })?;
    let total: usize = eval.iter().map(|i| i.output_payload.len()).sum();
    Ok(hits.iter().sum::<usize>() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainExperimentConfig {
    pub world: WorldConfig,
    pub records: usize,
    pub frames: usize,
    pub data_seed: u64,
    pub codec_iters: usize,
    pub codec_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub window_budget: usize,
    pub sample_seed: u64,
    pub threads: usize,
}

impl Default for ChainExperimentConfig {
    fn default() -> Self {
        let space = TokenSpace::new(TokenizerConfig::compact()).expect("compact layout");
        Self {
            world: WorldConfig {
                identities: 4,
                speech_noise: 1.0,
                seed: 3,
                ..WorldConfig::default()
            },
            records: 400,
            frames: 5,
            data_seed: 1000,
            codec_iters: 25,
            codec_seed: 5,
            model: model_config(space.vocab_size(), 11),
            train: TrainConfig {
                schedule: Schedule {
                    peak_lr: 5e-3,
                    final_lr: 5e-4,
                    warmup_steps: 30,
                    total_steps: 600,
                },
                ..TrainConfig::default()
            },
            steps: 600,
            window_budget: 2048,
            sample_seed: 17,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainExperimentReport {
    pub train_records: usize,
    pub held_out_records: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    /// Pixel accuracy of decoding the ground-truth semantic tokens.
    pub codec_accuracy: f64,
    pub direct_accuracy: f64,
    pub chained_accuracy: f64,
    pub direct_perplexity: f64,
    /// Final-step task perplexity: ground-truth semantic given speech and
    /// the ground-truth shape.
    pub chained_perplexity: f64,
    /// The same with the shape the chain generated.
    pub chained_perplexity_generated: f64,
    /// Fraction of held-out records whose generated shape tokens match.
    pub shape_token_accuracy: f64,
    pub train_seconds: f64,
}

impl ChainExperimentReport {
    pub fn chained_wins(&self) -> bool {
        self.chained_accuracy >= self.direct_accuracy && self.chained_perplexity <= self.direct_perplexity
    }
}

fn r(kind: ModalityKind) -> ModalityRef {
    ModalityRef::default_for(kind)
}

/// The three tasks both routes are trained on.
pub fn chain_registry() -> Registry {
    let speech = r(ModalityKind::Speech);
    let shape = r(ModalityKind::Shape);
    let semantic = r(ModalityKind::Semantic);
    Registry::new(vec![
        TaskSpec {
            inputs: vec![speech],
            output: shape,
        },
        TaskSpec {
            inputs: vec![speech],
            output: semantic,
        },
        TaskSpec {
            inputs: vec![speech, shape],
            output: semantic,
        },
    ])
    .expect("valid registry")
}

fn label_accuracy(a: &SemanticVideo, b: &SemanticVideo) -> f64 {
    a.labels.iter().zip(&b.labels).filter(|(x, y)| x == y).count() as f64 / a.labels.len() as f64
}

fn decode_semantic(tok: &Tokenizers, space: &TokenSpace, seg: &Segment) -> Result<SemanticVideo> {
    match tok.decode(space, seg)? {
        Decoded::Semantic(v) => Ok(v),
        _ => unreachable!("semantic segment"),
    }
}

pub fn run_chain_experiment(cfg: &ChainExperimentConfig) -> Result<ChainExperimentReport> {
    let world = AvatarWorld::new(cfg.world.clone())?;
    let split = ambiguous_task_dataset(&world, cfg.records, cfg.data_seed, cfg.frames)?;
    let tok = Tokenizers::train(&split.train, &TokenizerConfig::compact(), cfg.codec_iters, cfg.codec_seed)?;
    let space = tok.space()?;
    ensure!(cfg.model.vocab_size == space.vocab_size(), "model vocab must match the compact layout");
    let tokenize = |recs: &[SampleRecord]| -> Result<Vec<TokenizedRecord>> {
        recs.iter().map(|r| Ok(tok.tokenize(&space, r)?)).collect()
    };
    let train = tokenize(&split.train)?;
    let held = tokenize(&split.held_out)?;
    let registry = chain_registry();
    let specs = registry.specs().to_vec();

    let pool = thread_pool(cfg.threads);
    let mut model = Model::new(cfg.model.clone())?;
    let mut state = TrainState::new(&model, cfg.train.clone());
    let mut g = rng::seeded(cfg.sample_seed);
    let started = Instant::now();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut failure = None;
        let (window, packed) = fill_window(
            || {
                let spec = &specs[g.random_range(0..specs.len())];
                let rec = &train[g.random_range(0..train.len())];
                match build_instance(rec, spec).map_err(anyhow::Error::from).and_then(|i| Ok(prompt::serialize(&i, &space)?)) {
                    Ok(s) => s,
                    Err(e) => {
                        failure = Some(e);
                        Serialized {
                            tokens: vec![PAD_ID; cfg.window_budget + 1],
                            prefix_len: 0,
                        }
                    }
                }
            },
            cfg.window_budget,
            PAD_ID,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let loss = train_window(&pool, &mut model, &mut state, &window)? / packed.len() as f64;
        final_loss = loss;
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("chain step {step}: mean instance loss {loss:.4} over {} instances", packed.len());
        }
    }
    let train_seconds = started.elapsed().as_secs_f64();

    // held-out evaluation
    let speech = r(ModalityKind::Speech);
    let shape = r(ModalityKind::Shape);
    let semantic = r(ModalityKind::Semantic);
    let plan = plan_chain(&registry, &[speech], Target::Modality(semantic), Strategy::Canonical)?;
    ensure!(plan.steps == [shape, semantic], "unexpected chain plan {plan}");
    struct Eval {
        codec: f64,
        direct: f64,
        chained: f64,
        shape_ok: bool,
        direct_inst: Serialized,
        chained_inst: Serialized,
        generated_inst: Serialized,
    }
    let results: Vec<Eval> = pool.install(|| {
        held.par_iter()
            .zip(&split.held_out)
            .enumerate()
            .map(|(i, (t, rec))| -> Result<Eval> {
                let truth = &rec.current.semantic;
                let gt = t.get(semantic)?;
                let codec = label_accuracy(&decode_semantic(&tok, &space, gt)?, truth);
                let direct_inst = build_instance(t, &specs[1])?;
                let out = model.generate_output(&direct_inst, &space, 0.0, i as u64)?;
                let direct_seg = Segment { payload: out, ..gt.clone() };
                let direct = label_accuracy(&decode_semantic(&tok, &space, &direct_seg)?, truth);

                let conds = vec![t.get(speech)?.clone()];
                let dims = |m: ModalityRef| t.get(m).ok().map(|s| s.dims);
                let chain = run_chain(&model, &space, &registry, &plan, &conds, &dims, &mut NoRenderer, 0.0, i as u64)?;
                let gen_shape = chain.get(shape).context("chain produced no shape")?;
                let chained = label_accuracy(&decode_semantic(&tok, &space, chain.get(semantic).context("no semantic")?)?, truth);
                let final_inst = build_instance(t, &specs[2])?;
                let mut generated_inst = final_inst.clone();
                generated_inst.conditions[1] = gen_shape.clone();
                Ok(Eval {
                    codec,
                    direct,
                    chained,
                    shape_ok: gen_shape.payload == t.get(shape)?.payload,
                    direct_inst: prompt::serialize(&direct_inst, &space)?,
                    chained_inst: prompt::serialize(&final_inst, &space)?,
                    generated_inst: prompt::serialize(&generated_inst, &space)?,
                })
            })
            .collect::<Result<_>>()
    })?;
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&Eval) -> f64| results.iter().map(f).sum::<f64>() / n;
    let direct_set: Vec<Serialized> = results.iter().map(|e| e.direct_inst.clone()).collect();
    let chained_set: Vec<Serialized> = results.iter().map(|e| e.chained_inst.clone()).collect();
    let generated_set: Vec<Serialized> = results.iter().map(|e| e.generated_inst.clone()).collect();
    Ok(ChainExperimentReport {
        train_records: train.len(),
        held_out_records: held.len(),
        steps: cfg.steps,
        final_train_loss: final_loss,
        codec_accuracy: mean(&|e| e.codec),
        direct_accuracy: mean(&|e| e.direct),
        chained_accuracy: mean(&|e| e.chained),
        direct_perplexity: estimate_perplexity(&model, &direct_set, direct_set.len())?,
        chained_perplexity: estimate_perplexity(&model, &chained_set, chained_set.len())?,
        chained_perplexity_generated: estimate_perplexity(&model, &generated_set, generated_set.len())?,
        shape_token_accuracy: mean(&|e| if e.shape_ok { 1.0 } else { 0.0 }),
        train_seconds,
    })
}
