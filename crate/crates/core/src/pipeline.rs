//! Glue between synthetic records, the codecs and the prompt format:
//! trains every tokenizer, turns records into token segments, builds task
//! instances and decodes generated payloads.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{
    decode_animation, decode_image, decode_semantic_video, decode_speech, decode_text, encode_animation, encode_image,
    encode_semantic_video, encode_speech, encode_text, image_patch_dim, render_video, semantic_features,
    AnimationCodecs, AnimationTokens, CodecError, Dims, Palette, RgbImage, RgbVideo, SemanticVideo, SpeechSignal,
    TokenSpace, TokenizerConfig, SEMANTIC_FEATURE_DIM,
};
use crate::model::{ChainRenderer, ModelError};
use crate::prompt::{ModalityRef, PromptError, Segment, State, TaskInstance};
use crate::quantize::{train_codebook, train_rvq, Codebook, LfqCodec, QuantError, RvqCodec};
use crate::rng;
use crate::synth::{Clip, SampleRecord};
use crate::tasks::TaskSpec;
use crate::vocab::ModalityKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("no records")]
    Empty,
    #[error("record has no {0} segment")]
    Missing(ModalityRef),
    #[error("records disagree on {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Every trained tokenizer, plus what is needed to rebuild the fixed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizers {
    pub config: TokenizerConfig,
    pub animation: AnimationCodecs,
    pub speech: RvqCodec,
    pub semantic: Codebook,
    pub image: LfqCodec,
    pub image_seed: u64,
    pub palette: Palette,
}

fn clips(rec: &SampleRecord) -> [&Clip; 2] {
    [&rec.past, &rec.current]
}

impl Tokenizers {
    /// Trains on both clips of every record. Seeds per codec are derived
    /// from `seed`.
    pub fn train(records: &[SampleRecord], config: &TokenizerConfig, iters: usize, seed: u64) -> Result<Self, PipelineError> {
        let first = records.first().ok_or(PipelineError::Empty)?;
        let (h, w) = (first.image.height, first.image.width);
        if records.iter().any(|r| r.image.height != h || r.image.width != w) {
            return Err(PipelineError::Inconsistent("frame size".into()));
        }
        let window = config.speech_window();
        if first.current.speech.window() != window {
            return Err(PipelineError::Inconsistent(format!(
                "speech window {} vs configured {window}",
                first.current.speech.window()
            )));
        }
        let mut anim = Vec::with_capacity(records.len() * 2);
        let mut speech = Vec::new();
        let mut sem = Vec::new();
        for r in records {
            anim.push(r.past_animation()?);
            anim.push(r.animation()?);
            for c in clips(r) {
                speech.extend(c.speech.padded());
                sem.extend(semantic_features(&c.semantic)?);
            }
        }
        let image_seed = rng::derive(seed, 40);
        let sp = config.speech;
        Ok(Self {
            config: config.clone(),
            animation: AnimationCodecs::train(&anim, config, iters, rng::derive(seed, 10))?,
            speech: train_rvq(
                &speech,
                window,
                &vec![sp.codes as usize; sp.levels as usize],
                iters,
                rng::derive(seed, 20),
            )?,
            semantic: train_codebook(
                &sem,
                SEMANTIC_FEATURE_DIM,
                config.semantic_codes as usize,
                iters,
                rng::derive(seed, 30),
            )?,
            image: LfqCodec::new(image_patch_dim(h, w)?, config.image_code_bits as usize, image_seed)?,
            image_seed,
            palette: Palette::default(),
        })
    }

    pub fn space(&self) -> Result<TokenSpace, CodecError> {
        TokenSpace::new(self.config.clone())
    }

    /// Every modality of `rec` as a segment with global ids, in registry
    /// modality order.
    pub fn tokenize(&self, space: &TokenSpace, rec: &SampleRecord) -> Result<TokenizedRecord, PipelineError> {
        use ModalityKind::*;
        let mut segments = BTreeMap::new();
        let frames = rec.frames as u32;
        let mut put = |r: ModalityRef, dims: Dims, local: Vec<u32>| -> Result<(), PipelineError> {
            let payload = space.globalize_payload(r.kind, dims, &local)?;
            segments.insert(r, Segment { modality: r, dims, payload });
            Ok(())
        };
        let text = |s: &str| (Dims::Text { bytes: s.len() as u32 }, encode_text(s));
        let (d, t) = text(&rec.description);
        put(ModalityRef::invariant(Description), d, t)?;
        let cur = encode_animation(&rec.animation()?, &self.animation)?;
        let past = encode_animation(&rec.past_animation()?, &self.animation)?;
        put(ModalityRef::invariant(Shape), Dims::Static, cur.shape.clone())?;
        for (state, clip, anim) in [(State::Past, &rec.past, past), (State::Current, &rec.current, cur)] {
            let r = |k| ModalityRef { kind: k, state };
            let (d, t) = text(&clip.script);
            put(r(Script), d, t)?;
            put(r(Speech), Dims::Frames { frames }, encode_speech(&clip.speech, &self.speech)?)?;
            put(r(Expression), Dims::Frames { frames }, anim.expression)?;
            put(r(Pose), Dims::Frames { frames }, anim.pose)?;
            let v = &clip.semantic;
            put(
                r(Semantic),
                Dims::Video {
                    frames,
                    height: v.height as u32,
                    width: v.width as u32,
                },
                encode_semantic_video(v, &self.semantic)?,
            )?;
        }
        put(
            ModalityRef::invariant(Image),
            Dims::Image {
                height: rec.image.height as u32,
                width: rec.image.width as u32,
            },
            encode_image(&rec.image, &self.image)?,
        )?;
        Ok(TokenizedRecord {
            seed: rec.seed,
            identity: rec.identity,
            segments,
        })
    }

    /// Decodes a segment of global ids back into its media.
    pub fn decode(&self, space: &TokenSpace, seg: &Segment) -> Result<Decoded, PipelineError> {
        let kind = seg.modality.kind;
        let local = space.localize_payload(kind, seg.dims, &seg.payload)?;
        let c = &self.config;
        Ok(match (kind, seg.dims) {
            (ModalityKind::Description | ModalityKind::Script, _) => Decoded::Text(decode_text(&local)),
            (ModalityKind::Speech, _) => Decoded::Speech(decode_speech(
                &local,
                &self.speech,
                c.speech_sample_rate,
                c.speech_frame_rate,
            )?),
            (ModalityKind::Shape, _) => Decoded::Shape(self.decode_animation_part(kind, &local, 1)?),
            (ModalityKind::Expression | ModalityKind::Pose, Dims::Frames { frames }) => {
                Decoded::Track(self.decode_animation_part(kind, &local, frames as usize)?)
            }
            (ModalityKind::Semantic, Dims::Video { frames, height, width }) => Decoded::Semantic(decode_semantic_video(
                &local,
                &self.semantic,
                frames as usize,
                height as usize,
                width as usize,
            )?),
            (ModalityKind::Image, Dims::Image { height, width }) => {
                Decoded::Image(decode_image(&local, &self.image, height as usize, width as usize)?)
            }
            _ => return Err(CodecError::InvalidDims { kind, dims: seg.dims }.into()),
        })
    }

    /// Decodes one animation component; the other two are filled with
    /// code 0 and discarded.
    fn decode_animation_part(&self, kind: ModalityKind, local: &[u32], frames: usize) -> Result<Vec<f64>, PipelineError> {
        let a = &self.animation;
        let lat = crate::codecs::latent_frames(frames as u32)? as usize;
        let zeros = |c: &RvqCodec, n: usize| vec![0u32; n * c.num_levels()];
        let mut tokens = AnimationTokens {
            shape: zeros(&a.shape, 1),
            expression: zeros(&a.expression, lat),
            pose: zeros(&a.pose, lat),
        };
        match kind {
            ModalityKind::Shape => tokens.shape = local.to_vec(),
            ModalityKind::Expression => tokens.expression = local.to_vec(),
            _ => tokens.pose = local.to_vec(),
        }
        let p = decode_animation(&tokens, a, frames, self.config.speech_frame_rate)?;
        Ok(match kind {
            ModalityKind::Shape => p.shape,
            ModalityKind::Expression => p.expression,
            _ => p.pose,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Text(String),
    Speech(SpeechSignal),
    Shape(Vec<f64>),
    /// Frame-major expression or pose rows.
    Track(Vec<f64>),
    Semantic(SemanticVideo),
    Image(RgbImage),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedRecord {
    pub seed: u64,
    pub identity: usize,
    pub segments: BTreeMap<ModalityRef, Segment>,
}

impl TokenizedRecord {
    pub fn get(&self, r: ModalityRef) -> Result<&Segment, PipelineError> {
        self.segments.get(&r).ok_or(PipelineError::Missing(r))
    }
}

/// The instance of `spec` drawn from `rec`, with conditions in spec order.
pub fn build_instance(rec: &TokenizedRecord, spec: &TaskSpec) -> Result<TaskInstance, PipelineError> {
    let out = rec.get(spec.output)?;
    Ok(TaskInstance {
        conditions: spec.inputs.iter().map(|&r| rec.get(r).cloned()).collect::<Result<_, _>>()?,
        output: spec.output,
        output_dims: out.dims,
        output_payload: out.payload.clone(),
    })
}

/// Renders a generated semantic video against the decoded reference image
/// found among the chain's segments.
pub struct SemanticRenderer<'a> {
    pub tokenizers: &'a Tokenizers,
    pub space: &'a TokenSpace,
}

impl ChainRenderer for SemanticRenderer<'_> {
    type Output = RgbVideo;

    fn render(&mut self, semantic: &Segment, available: &[Segment]) -> Result<RgbVideo, ModelError> {
        let err = |e: PipelineError| ModelError::Render(format!("{e}"));
        let image_ref = ModalityRef::invariant(ModalityKind::Image);
        let image = available
            .iter()
            .find(|s| s.modality == image_ref)
            .ok_or_else(|| err(PipelineError::Missing(image_ref)))?;
        let Decoded::Semantic(video) = self.tokenizers.decode(self.space, semantic).map_err(err)? else {
            unreachable!("semantic segment decodes to a semantic video")
        };
        let Decoded::Image(reference) = self.tokenizers.decode(self.space, image).map_err(err)? else {
            unreachable!("image segment decodes to an image")
        };
        Ok(render_video(&video, &reference, &self.tokenizers.palette)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt;
    use crate::synth::{generate_dataset, AvatarWorld, WorldConfig};
    use crate::tasks::{full_modality_set, registry_default};

    fn setup() -> (Tokenizers, TokenSpace, Vec<SampleRecord>) {
        let world = AvatarWorld::new(WorldConfig::default()).unwrap();
        let recs = generate_dataset(&world, 24, 0, 5).unwrap();
        let tok = Tokenizers::train(&recs, &TokenizerConfig::compact(), 10, 1).unwrap();
        let space = tok.space().unwrap();
        (tok, space, recs)
    }

    #[test]
    fn every_registry_task_builds_and_serializes() {
        let (tok, space, recs) = setup();
        let t = tok.tokenize(&space, &recs[0]).unwrap();
        assert_eq!(t.segments.keys().copied().collect::<Vec<_>>(), {
            let mut v = full_modality_set();
            v.sort();
            v
        });
        for spec in registry_default().specs() {
            let inst = build_instance(&t, spec).unwrap();
            let ser = prompt::serialize(&inst, &space).unwrap();
            assert_eq!(prompt::parse(&ser.tokens, &space).unwrap(), inst);
        }
    }

    #[test]
    fn decoding_recovers_the_media() {
        let (tok, space, recs) = setup();
        let r = &recs[3];
        let t = tok.tokenize(&space, r).unwrap();
        let dec = |k, s| tok.decode(&space, t.get(ModalityRef { kind: k, state: s }).unwrap()).unwrap();
        assert_eq!(dec(ModalityKind::Description, State::Invariant), Decoded::Text(r.description.clone()));
        assert_eq!(dec(ModalityKind::Script, State::Past), Decoded::Text(r.past.script.clone()));
        let Decoded::Shape(s) = dec(ModalityKind::Shape, State::Invariant) else { panic!() };
        assert_eq!(s.len(), r.shape.len());
        let Decoded::Semantic(v) = dec(ModalityKind::Semantic, State::Current) else { panic!() };
        let acc = v.labels.iter().zip(&r.current.semantic.labels).filter(|(a, b)| a == b).count() as f64
            / v.labels.len() as f64;
        assert!(acc > 0.6, "label accuracy {acc}");
        let Decoded::Speech(sp) = dec(ModalityKind::Speech, State::Current) else { panic!() };
        assert_eq!(sp.samples.len(), r.current.speech.samples.len());
    }

    #[test]
    fn training_is_deterministic() {
        let (tok, _, recs) = setup();
        assert_eq!(Tokenizers::train(&recs, &TokenizerConfig::compact(), 10, 1).unwrap(), tok);
    }
}
