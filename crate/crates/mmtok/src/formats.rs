//! Binary file formats. Everything is little-endian.
//!
//! | file | layout |
//! |------|--------|
//! | codebooks | `MMCB`, version u16, dim u32, levels u32, per level: k u32 then k·dim f64 |
//! | tokens | `MMTK`, version u16, layout hash u64, tag u8, levels u8, dims 4×u32, count u32, tokens u32 |
//! | labels | L u32, H u32, W u32, reserved u32, then L·H·W u8 |
//! | rgb (image or video) | L u32, H u32, W u32, channels u32 (= 3), then L·H·W·3 f64 |
//! | signal | sample rate u32, frame rate u32, count u64, then count f64 |
//! | checkpoint | `MMCK`, version u16, header length u32, JSON header, then per tensor: count u64, f64 values |

use mmtok_core::codecs::{RgbImage, RgbVideo, SemanticVideo, SpeechSignal};
use mmtok_core::model::{Model, ModelConfig, TrainConfig, TrainState};
use mmtok_core::prompt::Segment;
use mmtok_core::quantize::{Codebook, RvqCodec};
use mmtok_core::vocab::ModalityKind;
use mmtok_core::{Dims, TokenSpace};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MMCB";
pub const TOKEN_MAGIC: &[u8; 4] = b"MMTK";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u16 = 1;
/// Token-file tag for whole prompts and packed windows, which mix
/// modalities. Single-modality files use `ModalityKind::tag`.
pub const MIXED_TAG: u8 = 0xff;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("file ends early")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("token file was written for layout {file:#018x}, current layout is {current:#018x}")]
    LayoutMismatch { file: u64, current: u64 },
    #[error("invalid file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn magic(&mut self, m: &'static [u8; 4]) -> Result<(), FormatError> {
        if self.take(4)? != m {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(m).unwrap_or("?"),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        match self.u16()? {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, n: u64, elem: usize) -> Result<usize, FormatError> {
        let n = usize::try_from(n).map_err(|_| FormatError::Truncated)?;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len()) {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }

    fn f64s(&mut self, n: u64) -> Result<Vec<f64>, FormatError> {
        let n = self.len(n, 8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: u64) -> Result<Vec<u32>, FormatError> {
        let n = self.len(n, 4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Invalid(format!("{what} {n} does not fit in u32")))
}

pub fn codebooks_to_bytes(levels: &[Codebook]) -> Result<Vec<u8>, FormatError> {
    let dim = levels.first().map_or(0, Codebook::dim);
    if levels.iter().any(|c| c.dim() != dim) {
        return Err(FormatError::Invalid("codebooks differ in dimension".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(levels.len(), "levels")?.to_le_bytes());
    for c in levels {
        out.extend_from_slice(&u32_of(c.k(), "k")?.to_le_bytes());
        put_f64s(&mut out, c.entries());
    }
    Ok(out)
}

pub fn codebooks_from_bytes(bytes: &[u8]) -> Result<Vec<Codebook>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CODEBOOK_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let levels = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..levels {
        let k = r.u32()? as u64;
        let entries = r.f64s(k * dim as u64)?;
        out.push(Codebook::from_entries(dim, entries).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

pub fn rvq_to_bytes(codec: &RvqCodec) -> Result<Vec<u8>, FormatError> {
    codebooks_to_bytes(codec.levels())
}

pub fn rvq_from_bytes(bytes: &[u8]) -> Result<RvqCodec, FormatError> {
    RvqCodec::new(codebooks_from_bytes(bytes)?).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Contents of an `MMTK` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFile {
    pub layout_hash: u64,
    pub tag: u8,
    pub levels: u8,
    pub dims: [u32; 4],
    pub tokens: Vec<u32>,
}

impl TokenFile {
    /// A whole prompt or packed window.
    pub fn sequence(space: &TokenSpace, tokens: Vec<u32>) -> Self {
        Self {
            layout_hash: space.layout.hash(),
            tag: MIXED_TAG,
            levels: 0,
            dims: [0; 4],
            tokens,
        }
    }

    /// One modality segment with global ids.
    pub fn segment(space: &TokenSpace, seg: &Segment) -> Self {
        let kind = seg.modality.kind;
        Self {
            layout_hash: space.layout.hash(),
            tag: kind.tag(),
            levels: space.config.levels(kind).min(255) as u8,
            dims: seg.dims.to_words(),
            tokens: seg.payload.clone(),
        }
    }

    /// Fails unless the file was written under `space`'s layout.
    pub fn check_layout(&self, space: &TokenSpace) -> Result<(), FormatError> {
        let current = space.layout.hash();
        if self.layout_hash != current {
            return Err(FormatError::LayoutMismatch {
                file: self.layout_hash,
                current,
            });
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<ModalityKind> {
        ModalityKind::from_tag(self.tag)
    }

    pub fn segment_dims(&self) -> Result<(ModalityKind, Dims), FormatError> {
        let kind = self
            .kind()
            .ok_or_else(|| FormatError::Invalid(format!("tag {} is not a modality", self.tag)))?;
        Ok((kind, Dims::from_words(kind, self.dims)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(36 + 4 * self.tokens.len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.layout_hash.to_le_bytes());
        out.push(self.tag);
        out.push(self.levels);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(self.tokens.len(), "token count")?.to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(TOKEN_MAGIC)?;
        r.version()?;
        let layout_hash = r.u64()?;
        let tag = r.u8()?;
        let levels = r.u8()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let n = r.u32()?;
        let tokens = r.u32s(n as u64)?;
        r.finish()?;
        Ok(Self {
            layout_hash,
            tag,
            levels,
            dims,
            tokens,
        })
    }
}

pub fn labels_to_bytes(v: &SemanticVideo) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + v.labels.len());
    for d in [v.frames, v.height, v.width, 0] {
        out.extend_from_slice(&u32_of(d, "label dim")?.to_le_bytes());
    }
    out.extend_from_slice(&v.labels);
    Ok(out)
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<SemanticVideo, FormatError> {
    let mut r = Reader::new(bytes);
    let (l, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    r.u32()?;
    let n = r.len((l as u64) * (h as u64) * (w as u64), 1)?;
    let labels = r.take(n)?.to_vec();
    r.finish()?;
    SemanticVideo::new(l, h, w, labels).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn rgb_bytes(frames: usize, height: usize, width: usize, pixels: &[[f64; 3]]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + 24 * pixels.len());
    for d in [frames, height, width, 3] {
        out.extend_from_slice(&u32_of(d, "rgb dim")?.to_le_bytes());
    }
    for p in pixels {
        put_f64s(&mut out, p);
    }
    Ok(out)
}

fn rgb_parse(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<[f64; 3]>), FormatError> {
    let mut r = Reader::new(bytes);
    let (l, h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()?);
    if c != 3 {
        return Err(FormatError::Invalid(format!("expected 3 channels, got {c}")));
    }
    let v = r.f64s((l as u64) * (h as u64) * (w as u64) * 3)?;
    r.finish()?;
    Ok((l, h, w, v.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
}

pub fn rgb_to_bytes(img: &RgbImage) -> Result<Vec<u8>, FormatError> {
    rgb_bytes(1, img.height, img.width, &img.pixels)
}

pub fn rgb_from_bytes(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    let (l, h, w, pixels) = rgb_parse(bytes)?;
    if l != 1 {
        return Err(FormatError::Invalid(format!("expected one frame, got {l}")));
    }
    RgbImage::new(h, w, pixels).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn video_to_bytes(v: &RgbVideo) -> Result<Vec<u8>, FormatError> {
    rgb_bytes(v.frames, v.height, v.width, &v.pixels)
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<RgbVideo, FormatError> {
    let (frames, height, width, pixels) = rgb_parse(bytes)?;
    Ok(RgbVideo {
        frames,
        height,
        width,
        pixels,
    })
}

pub fn signal_to_bytes(s: &SpeechSignal) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * s.samples.len());
    out.extend_from_slice(&s.sample_rate.to_le_bytes());
    out.extend_from_slice(&s.frame_rate.to_le_bytes());
    out.extend_from_slice(&(s.samples.len() as u64).to_le_bytes());
    put_f64s(&mut out, &s.samples);
    out
}

pub fn signal_from_bytes(bytes: &[u8]) -> Result<SpeechSignal, FormatError> {
    let mut r = Reader::new(bytes);
    let sample_rate = r.u32()?;
    let frame_rate = r.u32()?;
    let n = r.u64()?;
    let samples = r.f64s(n)?;
    r.finish()?;
    Ok(SpeechSignal {
        samples,
        sample_rate,
        frame_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
}

/// A model, optionally with the optimizer state to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let header = CheckpointHeader {
            model: self.model.config().clone(),
            train: self.state.as_ref().map(|s| s.config.clone()),
            step: self.state.as_ref().map_or(0, |s| s.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(json.len(), "header length")?.to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensor = |xs: &[f64]| {
            out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
            put_f64s(&mut out, xs);
        };
        tensor(self.model.params());
        if let Some(s) = &self.state {
            let (m, v) = s.moments();
            tensor(m);
            tensor(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let n = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(n)?)?;
        let tensor = |r: &mut Reader| -> Result<Vec<f64>, FormatError> {
            let n = r.u64()?;
            r.f64s(n)
        };
        let params = tensor(&mut r)?;
        let model = Model::from_params(header.model, params).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let state = match header.train {
            Some(cfg) => {
                let (m, v) = (tensor(&mut r)?, tensor(&mut r)?);
                if m.len() != model.num_params() {
                    return Err(FormatError::Invalid("optimizer state does not match the model".into()));
                }
                Some(TrainState::from_parts(cfg, header.step, m, v).map_err(|e| FormatError::Invalid(e.to_string()))?)
            }
            None => None,
        };
        r.finish()?;
        Ok(Self { model, state })
    }
}
