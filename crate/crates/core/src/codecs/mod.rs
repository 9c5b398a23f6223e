//! Per-modality tokenizers and the token arithmetic that ties them to the
//! unified vocabulary.
//!
//! The tokenizers are desk-scale stand-ins for learned neural codecs: k-means
//! RVQ for animation and speech, label-histogram codewords for semantic
//! video, patch LFQ for images and raw bytes for text. Codebook sizes, token
//! counts and flattening orders are the ones the language model side relies
//! on.

mod animation;
mod image;
mod media;
mod palette;
mod render;
mod semantic;
mod speech;
mod text;

pub use animation::{
    decode_animation, denormalize_animation, encode_animation, normalize_animation, pool_latents, AnimationCodecs,
    AnimationTokens, DimStats, NormalizationStats,
};
pub use image::{decode_image, encode_image, image_patch_dim};
pub use media::{AnimationParams, RgbImage, RgbVideo, SemanticVideo, SpeechSignal};
pub use palette::{
    color_embed, color_unembed, composite_codec_loss, embed_labels, palette_logits, seg_cross_entropy, unembed_pixels,
    LossWeights, Palette, DEFAULT_TAU, NUM_LABELS,
};
pub use render::render_video;
pub use semantic::{decode_semantic_video, encode_semantic_video, semantic_features, SEMANTIC_FEATURE_DIM};
pub use speech::{decode_speech, encode_speech, speech_frame_features};
pub use text::{decode_text, encode_text, TEXT_END, TEXT_VOCAB};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::QuantError;
use crate::vocab::{build_layout, ModalityKind, VocabError, VocabularyLayout};

/// Temporal compression of animation and semantic latents.
pub const TEMPORAL_STRIDE: u32 = 4;
/// Semantic tokens per latent frame are an 8×8 grid.
pub const SEMANTIC_GRID: u32 = 8;
/// Image tokens are a 16×16 grid.
pub const IMAGE_GRID: u32 = 16;
/// Frames per window when budgeting a raw RGB clip for a video tokenizer.
pub const CLIP_WINDOW_FRAMES: u32 = 16;
/// Reference count for 5 s of speech quoted for the production codec. Not
/// reproduced by the desk configuration, which yields 500.
pub const REFERENCE_SPEECH_TOKENS_5S: usize = 940;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("invalid dims {dims} for {kind}")]
    InvalidDims { kind: ModalityKind, dims: Dims },
    #[error("temporal length {0} is not 1 mod 4")]
    BadTemporalLength(usize),
    #[error("expected {expected} tokens, got {got}")]
    TokenCountMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss weights must be non-negative")]
    InvalidWeight,
    #[error("token at payload position {position} is not valid for {kind}")]
    SlotViolation { kind: ModalityKind, position: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Per-segment shape metadata. It travels in prompt headers and token files
/// so payloads can be decoded without side information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dims {
    Text { bytes: u32 },
    Frames { frames: u32 },
    Static,
    Video { frames: u32, height: u32, width: u32 },
    Image { height: u32, width: u32 },
}

impl Dims {
    pub fn to_words(self) -> [u32; 4] {
        match self {
            Dims::Text { bytes } => [bytes, 0, 0, 0],
            Dims::Frames { frames } => [frames, 0, 0, 0],
            Dims::Static => [0; 4],
            Dims::Video { frames, height, width } => [frames, height, width, 0],
            Dims::Image { height, width } => [1, height, width, 0],
        }
    }

    pub fn from_words(kind: ModalityKind, w: [u32; 4]) -> Self {
        match kind {
            ModalityKind::Description | ModalityKind::Script => Dims::Text { bytes: w[0] },
            ModalityKind::Speech | ModalityKind::Expression | ModalityKind::Pose => Dims::Frames { frames: w[0] },
            ModalityKind::Shape => Dims::Static,
            ModalityKind::Semantic | ModalityKind::Video => Dims::Video {
                frames: w[0],
                height: w[1],
                width: w[2],
            },
            ModalityKind::Image => Dims::Image {
                height: w[1],
                width: w[2],
            },
        }
    }

    /// Whether this variant is the one `kind` uses.
    pub fn fits(self, kind: ModalityKind) -> bool {
        matches!(
            (kind, self),
            (ModalityKind::Description | ModalityKind::Script, Dims::Text { .. })
                | (ModalityKind::Speech | ModalityKind::Expression | ModalityKind::Pose, Dims::Frames { .. })
                | (ModalityKind::Shape, Dims::Static)
                | (ModalityKind::Semantic | ModalityKind::Video, Dims::Video { .. })
                | (ModalityKind::Image, Dims::Image { .. })
        )
    }

    /// Parses the header form produced by `Display`.
    pub fn parse(kind: ModalityKind, s: &str) -> Option<Self> {
        let nums: Option<Vec<u32>> = if s == "static" {
            Some(Vec::new())
        } else {
            s.split('x').map(canonical_u32).collect()
        };
        let nums = nums?;
        let dims = match (kind, nums.as_slice()) {
            (ModalityKind::Description | ModalityKind::Script, [b]) => Dims::Text { bytes: *b },
            (ModalityKind::Speech | ModalityKind::Expression | ModalityKind::Pose, [f]) => Dims::Frames { frames: *f },
            (ModalityKind::Shape, []) => Dims::Static,
            (ModalityKind::Semantic | ModalityKind::Video, [f, h, w]) => Dims::Video {
                frames: *f,
                height: *h,
                width: *w,
            },
            (ModalityKind::Image, [h, w]) => Dims::Image { height: *h, width: *w },
            _ => return None,
        };
        Some(dims)
    }
}

fn canonical_u32(p: &str) -> Option<u32> {
    // reject "+1", "01" and friends so the header has one surface form
    if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) || (p.len() > 1 && p.starts_with('0')) {
        return None;
    }
    p.parse().ok()
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dims::Text { bytes } => write!(f, "{bytes}"),
            Dims::Frames { frames } => write!(f, "{frames}"),
            Dims::Static => f.write_str("static"),
            Dims::Video { frames, height, width } => write!(f, "{frames}x{height}x{width}"),
            Dims::Image { height, width } => write!(f, "{height}x{width}"),
        }
    }
}

/// Latent frames after causal 4× temporal compression: frame 0 alone, then
/// groups of four.
pub fn latent_frames(frames: u32) -> Result<u32, CodecError> {
    if frames == 0 || !(frames - 1).is_multiple_of(TEMPORAL_STRIDE) {
        return Err(CodecError::BadTemporalLength(frames as usize));
    }
    Ok((frames - 1) / TEMPORAL_STRIDE + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvqConfig {
    pub levels: u32,
    pub codes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub shape: RvqConfig,
    pub expression: RvqConfig,
    pub pose: RvqConfig,
    pub speech: RvqConfig,
    pub semantic_codes: u32,
    pub image_code_bits: u32,
    pub speech_sample_rate: u32,
    pub speech_frame_rate: u32,
    pub shape_dim: u32,
    pub expression_dim: u32,
    pub pose_dim: u32,
}

impl Default for TokenizerConfig {
    /// Production codebook sizes with a 10-bit image quantizer and a 1.6 kHz
    /// speech rate.
    fn default() -> Self {
        Self {
            shape: RvqConfig { levels: 8, codes: 512 },
            expression: RvqConfig { levels: 8, codes: 2048 },
            pose: RvqConfig { levels: 6, codes: 512 },
            speech: RvqConfig { levels: 4, codes: 1024 },
            semantic_codes: 1024,
            image_code_bits: 10,
            speech_sample_rate: 1600,
            speech_frame_rate: 25,
            shape_dim: 16,
            expression_dim: 8,
            pose_dim: 6,
        }
    }
}

impl TokenizerConfig {
    /// Full production sizes, including the 2^18 image vocabulary and 16 kHz
    /// speech.
    pub fn production() -> Self {
        Self {
            image_code_bits: 18,
            speech_sample_rate: 16_000,
            ..Self::default()
        }
    }

    /// Small codebooks for experiments that train a model in minutes on a
    /// CPU. Token arithmetic is unchanged apart from the level counts.
    pub fn compact() -> Self {
        Self {
            shape: RvqConfig { levels: 2, codes: 16 },
            expression: RvqConfig { levels: 2, codes: 32 },
            pose: RvqConfig { levels: 2, codes: 16 },
            speech: RvqConfig { levels: 2, codes: 32 },
            semantic_codes: 64,
            image_code_bits: 6,
            ..Self::default()
        }
    }

    pub fn rvq(&self, kind: ModalityKind) -> Option<RvqConfig> {
        match kind {
            ModalityKind::Shape => Some(self.shape),
            ModalityKind::Expression => Some(self.expression),
            ModalityKind::Pose => Some(self.pose),
            ModalityKind::Speech => Some(self.speech),
            _ => None,
        }
    }

    /// Number of vocabulary ranges (RVQ levels) a kind owns.
    pub fn levels(&self, kind: ModalityKind) -> u32 {
        match kind {
            ModalityKind::Video => 0,
            k => self.rvq(k).map_or(1, |c| c.levels),
        }
    }

    pub fn speech_window(&self) -> usize {
        (self.speech_sample_rate / self.speech_frame_rate.max(1)) as usize
    }

    /// `(kind, level, size)` in canonical order, ready for `build_layout`.
    pub fn range_specs(&self) -> Vec<(ModalityKind, u32, u32)> {
        let mut specs = alloc::vec![
            (ModalityKind::Description, 0, TEXT_VOCAB),
            (ModalityKind::Script, 0, TEXT_VOCAB),
        ];
        for kind in [
            ModalityKind::Speech,
            ModalityKind::Shape,
            ModalityKind::Expression,
            ModalityKind::Pose,
        ] {
            let c = self.rvq(kind).expect("rvq kind");
            specs.extend((0..c.levels).map(|l| (kind, l, c.codes)));
        }
        specs.push((ModalityKind::Semantic, 0, self.semantic_codes));
        specs.push((ModalityKind::Image, 0, 1u32 << self.image_code_bits.min(31)));
        specs
    }

    /// Closed-form payload length for `kind` with shape `dims`.
    pub fn token_count(&self, kind: ModalityKind, dims: Dims) -> Result<usize, CodecError> {
        let invalid = || CodecError::InvalidDims { kind, dims };
        if !dims.fits(kind) {
            return Err(invalid());
        }
        let levels = self.levels(kind) as usize;
        let n = match dims {
            Dims::Text { bytes } => bytes as usize + 1,
            Dims::Static => levels,
            Dims::Frames { frames } if kind == ModalityKind::Speech => {
                if frames == 0 {
                    return Err(invalid());
                }
                frames as usize * levels
            }
            Dims::Frames { frames } => {
                latent_frames(frames).map_err(|_| invalid())? as usize * levels
            }
            Dims::Video { frames, height, width } => {
                let lat = latent_frames(frames).map_err(|_| invalid())? as usize;
                let grid = if kind == ModalityKind::Video { IMAGE_GRID } else { SEMANTIC_GRID };
                if height == 0 || width == 0 || height % grid != 0 || width % grid != 0 {
                    return Err(invalid());
                }
                lat * (grid * grid) as usize
            }
            Dims::Image { height, width } => {
                if height == 0 || width == 0 || height % IMAGE_GRID != 0 || width % IMAGE_GRID != 0 {
                    return Err(invalid());
                }
                (IMAGE_GRID * IMAGE_GRID) as usize
            }
        };
        Ok(n)
    }

    /// Vocabulary level and admissible local ids at payload position `pos`.
    pub fn slot(&self, kind: ModalityKind, dims: Dims, pos: usize) -> Result<(u32, Range<u32>), CodecError> {
        let n = self.token_count(kind, dims)?;
        if pos >= n {
            return Err(CodecError::SlotViolation { kind, position: pos });
        }
        Ok(match kind {
            ModalityKind::Description | ModalityKind::Script => {
                if pos + 1 == n {
                    (0, TEXT_END..TEXT_END + 1)
                } else {
                    (0, 0..TEXT_END)
                }
            }
            ModalityKind::Speech | ModalityKind::Shape | ModalityKind::Expression | ModalityKind::Pose => {
                let c = self.rvq(kind).expect("rvq kind");
                ((pos % c.levels as usize) as u32, 0..c.codes)
            }
            ModalityKind::Semantic => (0, 0..self.semantic_codes),
            ModalityKind::Image => (0, 0..1u32 << self.image_code_bits),
            ModalityKind::Video => return Err(CodecError::InvalidDims { kind, dims }),
        })
    }
}

/// Token budget of a raw RGB clip under two accountings: a video tokenizer
/// emitting one 16×16 image grid per latent frame, and the semantic
/// tokenizer emitting one 8×8 grid per latent frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipBudget {
    pub frames: u32,
    pub latent_frames: u32,
    pub video_tokens: usize,
    pub semantic_tokens: usize,
}

/// Latent frames are counted per whole 16-frame window (4 latents each);
/// a trailing partial window is dropped.
pub fn clip_budget(seconds: u32, fps: u32) -> Result<ClipBudget, CodecError> {
    let frames = seconds * fps;
    let latent = frames / CLIP_WINDOW_FRAMES * (CLIP_WINDOW_FRAMES / TEMPORAL_STRIDE);
    if latent == 0 {
        return Err(CodecError::InvalidDims {
            kind: ModalityKind::Video,
            dims: Dims::Frames { frames },
        });
    }
    Ok(ClipBudget {
        frames,
        latent_frames: latent,
        video_tokens: latent as usize * (IMAGE_GRID * IMAGE_GRID) as usize,
        semantic_tokens: latent as usize * (SEMANTIC_GRID * SEMANTIC_GRID) as usize,
    })
}

/// A tokenizer configuration together with the vocabulary layout it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpace {
    pub config: TokenizerConfig,
    pub layout: VocabularyLayout,
}

impl TokenSpace {
    pub fn new(config: TokenizerConfig) -> Result<Self, CodecError> {
        let layout = build_layout(&config.range_specs())?;
        Ok(Self { config, layout })
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.total_size() as usize
    }

    pub fn token_count(&self, kind: ModalityKind, dims: Dims) -> Result<usize, CodecError> {
        self.config.token_count(kind, dims)
    }

    /// Global id of a header byte. Header text shares the script range.
    pub fn text_token(&self, byte: u8) -> u32 {
        self.layout
            .globalize(ModalityKind::Script, 0, byte as u32)
            .expect("script range always exists")
    }

    pub fn header_byte(&self, global: u32) -> Option<u8> {
        match self.layout.localize(global) {
            Ok((ModalityKind::Script, 0, local)) if local < 256 => Some(local as u8),
            _ => None,
        }
    }

    /// Global ids admissible at payload position `pos`.
    pub fn allowed(&self, kind: ModalityKind, dims: Dims, pos: usize) -> Result<Range<u32>, CodecError> {
        let (level, local) = self.config.slot(kind, dims, pos)?;
        let r = self.layout.range(kind, level)?;
        Ok(r.start + local.start..r.start + local.end)
    }

    pub fn globalize_payload(&self, kind: ModalityKind, dims: Dims, local: &[u32]) -> Result<Vec<u32>, CodecError> {
        let n = self.token_count(kind, dims)?;
        if local.len() != n {
            return Err(CodecError::TokenCountMismatch {
                expected: n,
                got: local.len(),
            });
        }
        local
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let (level, ok) = self.config.slot(kind, dims, pos)?;
                if !ok.contains(&id) {
                    return Err(CodecError::SlotViolation { kind, position: pos });
                }
                Ok(self.layout.globalize(kind, level, id)?)
            })
            .collect()
    }

    pub fn localize_payload(&self, kind: ModalityKind, dims: Dims, global: &[u32]) -> Result<Vec<u32>, CodecError> {
        let n = self.token_count(kind, dims)?;
        if global.len() != n {
            return Err(CodecError::TokenCountMismatch {
                expected: n,
                got: global.len(),
            });
        }
        global
            .iter()
            .enumerate()
            .map(|(pos, &g)| {
                let ok = self.allowed(kind, dims, pos)?;
                if !ok.contains(&g) {
                    return Err(CodecError::SlotViolation { kind, position: pos });
                }
                Ok(self.layout.localize(g)?.2)
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        format!("{} ids over {} ranges", self.vocab_size(), self.layout.ranges().len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semantic_and_expression_arithmetic() {
        let cfg = TokenizerConfig::default();
        let sem = Dims::Video {
            frames: 29,
            height: 128,
            width: 128,
        };
        assert_eq!(cfg.token_count(ModalityKind::Semantic, sem).unwrap(), 512);
        assert_eq!(
            cfg.token_count(ModalityKind::Expression, Dims::Frames { frames: 29 }).unwrap(),
            64
        );
        assert_eq!(cfg.token_count(ModalityKind::Speech, Dims::Frames { frames: 125 }).unwrap(), 500);
        assert_eq!(
            cfg.token_count(ModalityKind::Image, Dims::Image { height: 256, width: 256 }).unwrap(),
            256
        );
        assert_eq!(cfg.token_count(ModalityKind::Script, Dims::Text { bytes: 5 }).unwrap(), 6);
        assert_eq!(cfg.token_count(ModalityKind::Shape, Dims::Static).unwrap(), 8);
    }

    #[test]
    fn latent_arithmetic_for_valid_lengths() {
        for l in (1..=61).step_by(4) {
            assert_eq!(latent_frames(l).unwrap(), (l - 1) / 4 + 1);
        }
        assert_eq!(latent_frames(4), Err(CodecError::BadTemporalLength(4)));
    }

    #[test]
    fn degenerate_dims_rejected() {
        let cfg = TokenizerConfig::default();
        for (kind, dims) in [
            (ModalityKind::Speech, Dims::Frames { frames: 0 }),
            (ModalityKind::Expression, Dims::Frames { frames: 0 }),
            (
                ModalityKind::Semantic,
                Dims::Video {
                    frames: 0,
                    height: 128,
                    width: 128,
                },
            ),
            (ModalityKind::Image, Dims::Image { height: 0, width: 0 }),
            (ModalityKind::Image, Dims::Image { height: 20, width: 32 }),
            (ModalityKind::Speech, Dims::Static),
        ] {
            assert!(matches!(cfg.token_count(kind, dims), Err(CodecError::InvalidDims { .. })));
        }
    }

    #[test]
    fn clip_budget_four_times_smaller() {
        let b = clip_budget(5, 30).unwrap();
        assert_eq!(b.latent_frames, 36);
        assert_eq!(b.video_tokens, 9216);
        assert_eq!(b.semantic_tokens, 2304);
        assert_eq!(b.semantic_tokens * 4, b.video_tokens);
        assert!(clip_budget(0, 30).is_err());
    }

    #[test]
    fn dims_header_roundtrip() {
        let all = [
            (ModalityKind::Script, Dims::Text { bytes: 0 }),
            (ModalityKind::Speech, Dims::Frames { frames: 125 }),
            (ModalityKind::Shape, Dims::Static),
            (
                ModalityKind::Semantic,
                Dims::Video {
                    frames: 29,
                    height: 32,
                    width: 16,
                },
            ),
            (ModalityKind::Image, Dims::Image { height: 64, width: 32 }),
        ];
        for (kind, d) in all {
            let s = alloc::format!("{d}");
            assert_eq!(Dims::parse(kind, &s), Some(d));
            assert_eq!(Dims::from_words(kind, d.to_words()), d);
        }
        assert_eq!(Dims::parse(ModalityKind::Speech, "012"), None);
        assert_eq!(Dims::parse(ModalityKind::Speech, "1x2"), None);
    }

    #[test]
    fn token_space_slots() {
        let space = TokenSpace::new(TokenizerConfig::default()).unwrap();
        let dims = Dims::Frames { frames: 2 };
        let local = [1, 2, 3, 4, 5, 6, 7, 8];
        let g = space.globalize_payload(ModalityKind::Speech, dims, &local).unwrap();
        for (pos, &id) in g.iter().enumerate() {
            let (kind, level, l) = space.layout.localize(id).unwrap();
            assert_eq!((kind, level, l), (ModalityKind::Speech, pos as u32 % 4, local[pos]));
        }
        assert_eq!(space.localize_payload(ModalityKind::Speech, dims, &g).unwrap(), local);
        // text payloads end with the sentinel, never earlier
        let t = Dims::Text { bytes: 1 };
        assert!(space.globalize_payload(ModalityKind::Script, t, &[65, 256]).is_ok());
        assert!(space.globalize_payload(ModalityKind::Script, t, &[256, 65]).is_err());
        assert_eq!(space.header_byte(space.text_token(b'x')), Some(b'x'));
    }

    #[test]
    fn production_layout_has_full_image_range() {
        let space = TokenSpace::new(TokenizerConfig::production()).unwrap();
        let r = space.layout.range(ModalityKind::Image, 0).unwrap();
        assert_eq!(r.size, 1 << 18);
    }
}
