//! Command-line surface. `main` only parses arguments and calls `run`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use mmtok_core::model::{run_chain, Model, NoRenderer, TrainState};
use mmtok_core::pipeline::{build_instance, Decoded, SemanticRenderer, TokenizedRecord, Tokenizers};
use mmtok_core::prompt::{self, ModalityRef, Segment, Serialized, State, TaskInstance};
use mmtok_core::rng;
use mmtok_core::sampler::{compute_weights, estimate_perplexity, fill_window, sample_tasks_with, PackedSpan, TaskStats};
use mmtok_core::tasks::{plan_chain, registry_default, Strategy, Target, TaskSpec};
use mmtok_core::vocab::{ModalityKind, PAD_ID};
use mmtok_core::{Dims, TokenSpace};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stream};
use crate::dataset::{self, read_json, write_json, AnimationFile};
use crate::formats::{labels_to_bytes, rgb_to_bytes, signal_to_bytes, video_to_bytes, Checkpoint, TokenFile};
use crate::trainer::{thread_pool, train_window};
use crate::{codecs, eval};

#[derive(Debug, Parser)]
#[command(name = "mmtok", version, about = "Unified multimodal token pipeline at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for gradient and evaluation loops.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    GenData {
        /// Record count; defaults to `data.records`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train every codebook and write MMCB files plus metrics.json.
    TrainCodecs {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build an inference prompt from one record.
    Prompt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        /// Record index in the manifest.
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Comma-separated condition references, e.g. `speech(c),image(t)`.
        #[arg(long)]
        inputs: String,
        #[arg(long)]
        output: String,
    },
    /// Sample tasks and pack them into token windows.
    Pack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        /// Per-task perplexities from the `perplexity` command; a uniform
        /// baseline is used otherwise.
        #[arg(long)]
        perplexity: Option<PathBuf>,
    },
    /// Train the language model on packed windows.
    Train {
        #[arg(long)]
        windows: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a prompt, directly or through the intermediate-modality chain.
    Generate {
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        /// Generate canonical intermediates before the output.
        #[arg(long)]
        chain: bool,
        /// Render a video after the chain (needs an image condition).
        #[arg(long)]
        video: bool,
        /// Dims for generated modalities, e.g. `description(t)=18`.
        #[arg(long = "dims")]
        dims: Vec<String>,
    },
    /// Print the generation plan for a target.
    PlanChain {
        /// Comma-separated condition references.
        #[arg(long)]
        conditions: String,
        /// A modality reference or `video`.
        #[arg(long)]
        target: String,
        #[arg(long)]
        direct: bool,
    },
    /// Per-task perplexity over every registry task.
    Perplexity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        /// Untrained model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare predictions with reference records.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = RunConfig::resolve(g.config.as_ref(), g.seed)?;
    let out = || g.out.clone().context("--out is required for this command");
    match &cli.command {
        Command::GenData { n } => gen_data(&cfg, n.unwrap_or(cfg.data.records), &out()?),
        Command::TrainCodecs { data } => train_codecs(&cfg, data, &out()?),
        Command::Prompt {
            data,
            codecs,
            record,
            inputs,
            output,
        } => make_prompt(data, codecs, *record, inputs, output, &out()?),
        Command::Pack { data, codecs, perplexity } => pack(&cfg, data, codecs, perplexity.as_deref(), &out()?),
        Command::Train { windows, resume } => train(&cfg, windows, resume.as_deref(), g.threads, &out()?),
        Command::Generate {
            codecs,
            checkpoint,
            prompt,
            chain,
            video,
            dims,
        } => generate(&cfg, codecs, checkpoint, prompt, *chain, *video, dims, &out()?),
        Command::PlanChain {
            conditions,
            target,
            direct,
        } => {
            print!("{}", plan(conditions, target, *direct)?);
            Ok(())
        }
        Command::Perplexity { data, codecs, checkpoint } => {
            perplexity(&cfg, data, codecs, checkpoint.as_deref(), g.threads, &out()?)
        }
        Command::Eval { pred, truth } => evaluate(pred, truth, g.out.as_deref()),
    }
}

fn gen_data(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    let m = dataset::generate(&cfg.world, n, cfg.seed_for(Stream::Data), cfg.data.frames, out)?;
    println!("wrote {} records to {}", m.count, out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CodecReport {
    seed: u64,
    iters: usize,
    records: usize,
    vocab_size: usize,
    layout_hash: String,
    codebooks: Vec<codecs::CodebookMetrics>,
}

fn train_codecs(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let records = dataset::load(data)?;
    let seed = cfg.seed_for(Stream::Codecs);
    let t = Tokenizers::train(&records, &cfg.tokenizer, cfg.codecs.iters, seed)?;
    codecs::save(&t, out)?;
    let space = t.space()?;
    let report = CodecReport {
        seed,
        iters: cfg.codecs.iters,
        records: records.len(),
        vocab_size: space.vocab_size(),
        layout_hash: format!("{:#018x}", space.layout.hash()),
        codebooks: codecs::metrics(&t, &records)?,
    };
    write_json(&out.join("metrics.json"), &report)?;
    for c in &report.codebooks {
        info!("{}: distortion {:?}, utilization {:?}", c.name, c.distortion, c.utilization);
    }
    println!("wrote codecs for {} ids to {}", space.vocab_size(), out.display());
    Ok(())
}

fn parse_refs(list: &str) -> Result<Vec<ModalityRef>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<ModalityRef>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

struct Loaded {
    space: TokenSpace,
    records: Vec<TokenizedRecord>,
}

fn load_tokenized(data: &Path, codec_dir: &Path) -> Result<Loaded> {
    let tok = codecs::load(codec_dir)?;
    let space = tok.space()?;
    let raw = dataset::load(data)?;
    codecs::check_image_size(&tok, &raw)?;
    let records = raw.iter().map(|r| Ok(tok.tokenize(&space, r)?)).collect::<Result<_>>()?;
    Ok(Loaded { space, records })
}

fn write_tokens(path: &Path, file: &TokenFile) -> Result<()> {
    fs::write(path, file.to_bytes()?).with_context(|| format!("writing {}", path.display()))
}

fn read_tokens(path: &Path, space: &TokenSpace) -> Result<TokenFile> {
    let f = TokenFile::from_bytes(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("decoding {}", path.display()))?;
    f.check_layout(space)?;
    Ok(f)
}

fn make_prompt(data: &Path, codec_dir: &Path, record: usize, inputs: &str, output: &str, out: &Path) -> Result<()> {
    let l = load_tokenized(data, codec_dir)?;
    let rec = l
        .records
        .get(record)
        .with_context(|| format!("record {record} out of range ({} records)", l.records.len()))?;
    let spec = TaskSpec {
        inputs: parse_refs(inputs)?,
        output: parse_refs(output)?.into_iter().next().context("empty output")?,
    };
    let inst = build_instance(rec, &spec)?.as_inference();
    let ser = prompt::serialize(&inst, &l.space)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_tokens(out, &TokenFile::sequence(&l.space, ser.tokens))?;
    println!("wrote {spec} prompt for record {record} to {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PerplexityRow {
    index: usize,
    task: String,
    perplexity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerplexityTable {
    samples: usize,
    rows: Vec<PerplexityRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowEntry {
    file: String,
    spans: Vec<PackedSpan>,
    /// Registry row and record index of each packed instance.
    tasks: Vec<usize>,
    records: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowIndex {
    budget: usize,
    layout_hash: u64,
    windows: Vec<WindowEntry>,
}

const WINDOW_INDEX: &str = "windows.json";

fn pack(cfg: &RunConfig, data: &Path, codec_dir: &Path, ppl: Option<&Path>, out: &Path) -> Result<()> {
    let l = load_tokenized(data, codec_dir)?;
    ensure!(!l.records.is_empty(), "no records in {}", data.display());
    let registry = registry_default();
    let stats = match ppl {
        Some(p) => {
            let t: PerplexityTable = read_json(p)?;
            TaskStats::from_registry(&registry, t.rows.iter().map(|r| r.perplexity).collect())?
        }
        None => TaskStats::uniform(&registry, cfg.sampler.baseline_perplexity),
    };
    let weights = compute_weights(&stats)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("weights.json"), &weights)?;
    let budget = cfg.sampler.window_budget;
    let serialized: Vec<Vec<Serialized>> = l
        .records
        .iter()
        .map(|r| {
            registry
                .specs()
                .iter()
                .map(|s| Ok(prompt::serialize(&build_instance(r, s)?, &l.space)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut g = rng::seeded(cfg.seed_for(Stream::Sampler));
    let mut index = WindowIndex {
        budget,
        layout_hash: l.space.layout.hash(),
        windows: Vec::new(),
    };
    for w in 0..cfg.sampler.windows {
        let mut draws = Vec::new();
        let (window, packed) = fill_window(
            || {
                let task = sample_tasks_with(&weights, 1, &mut g)[0];
                let rec = g.random_range(0..serialized.len());
                draws.push((task, rec));
                serialized[rec][task].clone()
            },
            budget,
            PAD_ID,
        );
        ensure!(!packed.is_empty(), "no instance fits a {budget}-token window");
        let file = format!("window_{w:05}.mmtk");
        write_tokens(&out.join(&file), &TokenFile::sequence(&l.space, window.tokens))?;
        index.windows.push(WindowEntry {
            file,
            spans: window.spans,
            tasks: packed.iter().map(|&i| draws[i].0).collect(),
            records: packed.iter().map(|&i| draws[i].1).collect(),
        });
    }
    write_json(&out.join(WINDOW_INDEX), &index)?;
    println!("packed {} windows of {budget} tokens into {}", index.windows.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, windows_dir: &Path, resume: Option<&Path>, threads: usize, out: &Path) -> Result<()> {
    let space = cfg.space()?;
    let index: WindowIndex = read_json(&windows_dir.join(WINDOW_INDEX))?;
    ensure!(!index.windows.is_empty(), "no windows in {}", windows_dir.display());
    ensure!(
        index.layout_hash == space.layout.hash(),
        "windows were packed under a different vocabulary layout"
    );
    let windows: Vec<_> = index
        .windows
        .iter()
        .map(|e| {
            let f = read_tokens(&windows_dir.join(&e.file), &space)?;
            ensure!(f.tokens.len() == index.budget, "{} is not {} tokens long", e.file, index.budget);
            Ok(mmtok_core::sampler::PackedWindow {
                tokens: f.tokens,
                spans: e.spans.clone(),
                budget: index.budget,
            })
        })
        .collect::<Result<_>>()?;
    let (mut model, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::from_bytes(&fs::read(p)?)?;
            let state = ck.state.context("checkpoint has no optimizer state")?;
            (ck.model, state)
        }
        None => {
            let m = Model::new(cfg.model_config()?)?;
            let s = TrainState::new(&m, cfg.train.optimizer.clone());
            (m, s)
        }
    };
    ensure!(model.config().vocab_size == space.vocab_size(), "model vocabulary does not match the layout");
    ensure!(
        index.budget <= model.config().max_context,
        "window budget {} exceeds the model context {}",
        index.budget,
        model.config().max_context
    );
    fs::create_dir_all(out)?;
    let pool = thread_pool(threads);
    let mut log = String::from("step,lr,loss,instances\n");
    let save = |model: &Model, state: &TrainState| -> Result<()> {
        let ck = Checkpoint {
            model: model.clone(),
            state: Some(state.clone()),
        };
        fs::write(out.join("checkpoint.bin"), ck.to_bytes()?)?;
        Ok(())
    };
    while state.step < cfg.train.steps {
        let step = state.step;
        let w = &windows[step % windows.len()];
        let lr = mmtok_core::model::lr_at(&state.config.schedule, step);
        let loss = train_window(&pool, &mut model, &mut state, w)? / w.spans.len() as f64;
        writeln!(log, "{step},{lr},{loss},{}", w.spans.len())?;
        if cfg.train.log_every > 0 && step % cfg.train.log_every == 0 {
            info!("step {step}: lr {lr:.2e}, mean instance loss {loss:.4}");
        }
        if cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0 {
            save(&model, &state)?;
        }
    }
    save(&model, &state)?;
    let log_path = out.join("loss.csv");
    let mut full = if resume.is_some() && log_path.exists() {
        fs::read_to_string(&log_path)?
    } else {
        String::new()
    };
    if full.is_empty() {
        full = log;
    } else {
        full.push_str(log.split_once('\n').map_or("", |(_, rest)| rest));
    }
    fs::write(&log_path, full)?;
    println!("trained to step {}; checkpoint in {}", state.step, out.display());
    Ok(())
}

/// Explicit `--dims`, then the prompt's own output, then dims inferred from
/// the conditions: the clip length for temporal kinds and the frame size
/// for semantic video.
fn dims_lookup(
    explicit: &[String],
    inst: &TaskInstance,
    world_hw: (u32, u32),
) -> Result<impl Fn(ModalityRef) -> Option<Dims>> {
    let mut map = BTreeMap::new();
    for d in explicit {
        let (r, v) = d.split_once('=').with_context(|| format!("--dims {d:?} is not REF=DIMS"))?;
        let r: ModalityRef = r.trim().parse().map_err(|e| anyhow::anyhow!("{e}"))?;
        let dims = Dims::parse(r.kind, v.trim()).with_context(|| format!("bad dims {v:?} for {r}"))?;
        map.insert(r, dims);
    }
    map.entry(inst.output).or_insert(inst.output_dims);
    let frames = inst.conditions.iter().find_map(|s| match s.dims {
        Dims::Frames { frames } | Dims::Video { frames, .. } => Some(frames),
        _ => None,
    });
    let hw = inst
        .conditions
        .iter()
        .find_map(|s| match s.dims {
            Dims::Video { height, width, .. } if s.modality.kind == ModalityKind::Semantic => Some((height, width)),
            _ => None,
        })
        .unwrap_or(world_hw);
    Ok(move |r: ModalityRef| {
        map.get(&r).copied().or(match r.kind {
            ModalityKind::Shape => Some(Dims::Static),
            ModalityKind::Speech | ModalityKind::Expression | ModalityKind::Pose => {
                frames.map(|frames| Dims::Frames { frames })
            }
            ModalityKind::Semantic => frames.map(|frames| Dims::Video {
                frames,
                height: hw.0,
                width: hw.1,
            }),
            _ => None,
        })
    })
}

fn file_stem(r: ModalityRef) -> String {
    let pre = if r.state == State::Past { "past_" } else { "" };
    format!("{pre}{}", r.kind)
}

/// Writes a generated segment as tokens and as decoded media, using the
/// record file names the evaluator expects.
fn write_output(tok: &Tokenizers, space: &TokenSpace, seg: &Segment, out: &Path, anim: &mut BTreeMap<State, AnimationFile>) -> Result<()> {
    let stem = file_stem(seg.modality);
    let name = format!("{}_{}.mmtk", seg.modality.kind, seg.modality.state.tag());
    write_tokens(&out.join(name), &TokenFile::segment(space, seg))?;
    match tok.decode(space, seg)? {
        Decoded::Text(s) => fs::write(out.join(format!("{stem}.txt")), s)?,
        Decoded::Speech(s) => fs::write(out.join(format!("{stem}.sig")), signal_to_bytes(&s))?,
        Decoded::Semantic(v) => fs::write(out.join(format!("{stem}.lbl")), labels_to_bytes(&v)?)?,
        Decoded::Image(i) => fs::write(out.join("image.rgb"), rgb_to_bytes(&i)?)?,
        Decoded::Shape(v) => {
            // shape is shared by both clips
            for st in [State::Past, State::Current] {
                anim.entry(st).or_default().shape = Some(v.clone());
            }
        }
        Decoded::Track(v) => {
            let a = anim.entry(seg.modality.state).or_default();
            match seg.modality.kind {
                ModalityKind::Expression => a.expression = Some(v),
                _ => a.pose = Some(v),
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(
    cfg: &RunConfig,
    codec_dir: &Path,
    checkpoint: &Path,
    prompt_path: &Path,
    chain: bool,
    video: bool,
    dims: &[String],
    out: &Path,
) -> Result<()> {
    let tok = codecs::load(codec_dir)?;
    let space = tok.space()?;
    let model = Checkpoint::from_bytes(&fs::read(checkpoint)?)?.model;
    ensure!(model.config().vocab_size == space.vocab_size(), "model vocabulary does not match the codecs");
    let file = read_tokens(prompt_path, &space)?;
    let inst = prompt::parse(&file.tokens, &space)?;
    let registry = registry_default();
    let conds: Vec<ModalityRef> = inst.conditions.iter().map(|s| s.modality).collect();
    let target = if video { Target::Video } else { Target::Modality(inst.output) };
    let strategy = if chain || video { Strategy::Canonical } else { Strategy::Direct };
    let plan = plan_chain(&registry, &conds, target, strategy)?;
    info!("plan: {plan}");
    let lookup = dims_lookup(dims, &inst, (cfg.world.height as u32, cfg.world.width as u32))?;
    let seed = cfg.seed_for(Stream::Generate);
    let temp = cfg.generate.temperature;
    fs::create_dir_all(out)?;
    let generated = if plan.renders() {
        let mut r = SemanticRenderer {
            tokenizers: &tok,
            space: &space,
        };
        let res = run_chain(&model, &space, &registry, &plan, &inst.conditions, &lookup, &mut r, temp, seed)?;
        if let Some(v) = &res.rendered {
            fs::write(out.join("video.rgb"), video_to_bytes(v)?)?;
        }
        res.generated
    } else if chain {
        run_chain(&model, &space, &registry, &plan, &inst.conditions, &lookup, &mut NoRenderer, temp, seed)?.generated
    } else {
        let payload = model.generate_output(&inst, &space, temp, seed)?;
        vec![Segment {
            modality: inst.output,
            dims: inst.output_dims,
            payload,
        }]
    };
    let mut anim = BTreeMap::new();
    for seg in &generated {
        write_output(&tok, &space, seg, out, &mut anim)?;
    }
    for (st, a) in anim {
        let pre = if st == State::Past { "past_" } else { "" };
        write_json(&out.join(format!("{pre}animation.json")), &a)?;
    }
    write_json(&out.join("plan.json"), &plan)?;
    println!("{plan}");
    Ok(())
}

pub fn plan(conditions: &str, target: &str, direct: bool) -> Result<String> {
    let conds = parse_refs(conditions)?;
    let target: Target = target.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let strategy = if direct { Strategy::Direct } else { Strategy::Canonical };
    let plan = plan_chain(&registry_default(), &conds, target, strategy)?;
    Ok(format!("{plan}\n{}\n", serde_json::to_string(&plan)?))
}

fn perplexity(cfg: &RunConfig, data: &Path, codec_dir: &Path, ck: Option<&Path>, threads: usize, out: &Path) -> Result<()> {
    let l = load_tokenized(data, codec_dir)?;
    let model = match ck {
        Some(p) => Checkpoint::from_bytes(&fs::read(p)?)?.model,
        None => Model::new(cfg.model_config()?)?,
    };
    ensure!(model.config().vocab_size == l.space.vocab_size(), "model vocabulary does not match the codecs");
    let registry = registry_default();
    let take = cfg.sampler.perplexity_samples.min(l.records.len());
    ensure!(take > 0, "no records to score");
    let pool = thread_pool(threads);
    let rows: Vec<PerplexityRow> = pool.install(|| {
        use rayon::prelude::*;
        registry
            .specs()
            .par_iter()
            .enumerate()
            .map(|(index, spec)| {
                let inst = l.records[..take]
                    .iter()
                    .map(|r| Ok(prompt::serialize(&build_instance(r, spec)?, &l.space)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PerplexityRow {
                    index,
                    task: spec.to_string(),
                    perplexity: estimate_perplexity(&model, &inst, take)?,
                })
            })
            .collect::<Result<_>>()
    })?;
    let table = PerplexityTable { samples: take, rows };
    fs::create_dir_all(out)?;
    write_json(&out.join("perplexity.json"), &table)?;
    let mut csv = String::from("index,task,perplexity\n");
    for r in &table.rows {
        writeln!(csv, "{},\"{}\",{}", r.index, r.task, r.perplexity)?;
        println!("{:>2}  {:<60} {:>10.4}", r.index, r.task, r.perplexity);
    }
    fs::write(out.join("perplexity.csv"), csv)?;
    Ok(())
}

fn evaluate(pred: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = if truth.join(dataset::MANIFEST).exists() {
        dataset::read_manifest(truth)?
            .records
            .iter()
            .map(|e| (pred.join(&e.dir), truth.join(&e.dir)))
            .filter(|(p, _)| p.is_dir())
            .collect()
    } else {
        vec![(pred.to_path_buf(), truth.to_path_buf())]
    };
    if pairs.is_empty() {
        bail!("no prediction directories under {}", pred.display());
    }
    let report = eval::evaluate(&pairs)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        write_json(&o.join("eval.json"), &report)?;
    }
    println!("{text}");
    Ok(())
}
