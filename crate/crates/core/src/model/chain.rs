//! Executes a chain plan step by step, feeding each generated modality
//! back in as a condition for later steps.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use super::{Model, ModelError};
use crate::codecs::{Dims, TokenSpace};
use crate::prompt::{ModalityRef, Segment, TaskInstance};
use crate::rng;
use crate::tasks::{self, ChainPlan, Registry};
use crate::vocab::ModalityKind;

/// Final pixel-domain stage of a chain that targets rendered video.
pub trait ChainRenderer {
    type Output;
    /// `semantic` is the semantic-video segment; `available` holds every
    /// condition and generated segment.
    fn render(&mut self, semantic: &Segment, available: &[Segment]) -> Result<Self::Output, ModelError>;
}

/// Renderer for chains that never render.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRenderer;

impl ChainRenderer for NoRenderer {
    type Output = ();
    fn render(&mut self, _: &Segment, _: &[Segment]) -> Result<(), ModelError> {
        Err(ModelError::InvalidChain("chain renders but no renderer was given".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput<R> {
    /// Generated segments in step order.
    pub generated: Vec<Segment>,
    /// Registry row used for each step.
    pub specs: Vec<usize>,
    pub rendered: Option<R>,
}

impl<R> ChainOutput<R> {
    pub fn get(&self, r: ModalityRef) -> Option<&Segment> {
        self.generated.iter().find(|s| s.modality == r)
    }
}

/// Runs `plan`. Each step is prompted with the inputs of the registry row
/// that licenses it, drawn from the conditions and earlier outputs.
/// `output_dims` supplies the dims of every generated modality.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<R: ChainRenderer>(
    model: &Model,
    space: &TokenSpace,
    registry: &Registry,
    plan: &ChainPlan,
    conditions: &[Segment],
    output_dims: &dyn Fn(ModalityRef) -> Option<Dims>,
    renderer: &mut R,
    temperature: f64,
    seed: u64,
) -> Result<ChainOutput<R::Output>, ModelError> {
    let cond_refs: Vec<ModalityRef> = conditions.iter().map(|s| s.modality).collect();
    if cond_refs != plan.conditions {
        return Err(ModelError::InvalidChain(format!(
            "plan expects {} conditions, got {}",
            plan.conditions.len(),
            conditions.len()
        )));
    }
    let steps = tasks::decompose(registry, &cond_refs, &plan.steps)
        .map_err(|e| ModelError::InvalidChain(format!("{e}")))?;
    let mut available: Vec<Segment> = conditions.to_vec();
    let mut out = ChainOutput {
        generated: Vec::new(),
        specs: Vec::new(),
        rendered: None,
    };
    let wrap = |step: usize| move |e: ModelError| ModelError::Chain { step, source: Box::new(e) };
    for (i, step) in steps.iter().enumerate() {
        let spec = &registry.specs()[step.spec];
        let dims = output_dims(step.target)
            .ok_or_else(|| wrap(i)(ModelError::InvalidChain(format!("no dims for {}", step.target))))?;
        let inst = TaskInstance {
            conditions: spec
                .inputs
                .iter()
                .map(|r| available.iter().find(|s| s.modality == *r).expect("licensed input").clone())
                .collect(),
            output: step.target,
            output_dims: dims,
            output_payload: Vec::new(),
        };
        let payload = model
            .generate_output(&inst, space, temperature, rng::derive(seed, i as u64))
            .map_err(wrap(i))?;
        let seg = Segment {
            modality: step.target,
            dims,
            payload,
        };
        available.push(seg.clone());
        out.generated.push(seg);
        out.specs.push(step.spec);
    }
    if plan.renders() {
        let semantic = available
            .iter()
            .find(|s| s.modality == ModalityRef::current(ModalityKind::Semantic))
            .ok_or_else(|| wrap(steps.len())(ModelError::InvalidChain("no semantic video to render".into())))?;
        out.rendered = Some(renderer.render(semantic, &available).map_err(wrap(steps.len()))?);
    }
    Ok(out)
}
