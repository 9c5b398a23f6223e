//! Deterministic synthetic "avatar world": a handful of identities, each
//! with fixed description words, voice frequency, face shape and hair, from
//! which mutually consistent multimodal clips are generated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{embed_labels, latent_frames, AnimationParams, CodecError, Palette, RgbImage, SemanticVideo, SpeechSignal};
use crate::rng;

/// Identity count is capped by the attribute word lists and the label set.
pub const MAX_IDENTITIES: usize = 8;

const HAIR_WORDS: [&str; MAX_IDENTITIES] = ["black", "blond", "red", "brown", "grey", "white", "auburn", "silver"];
const BUILD_WORDS: [&str; MAX_IDENTITIES] = ["tall", "short", "slim", "broad", "small", "lanky", "stocky", "petite"];
const VOICE_WORDS: [&str; MAX_IDENTITIES] = ["deep", "high", "soft", "bright", "husky", "warm", "crisp", "airy"];
const SCRIPT_WORDS: [&str; 8] = ["ba", "do", "mi", "so", "la", "ti", "ka", "ne"];

pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const LEFT_BROW: u8 = 2;
    pub const RIGHT_BROW: u8 = 3;
    pub const LEFT_EYE: u8 = 4;
    pub const RIGHT_EYE: u8 = 5;
    pub const NOSE: u8 = 6;
    pub const LIP: u8 = 7;
    pub const MOUTH: u8 = 8;
    pub const NECK: u8 = 10;
    pub const CLOTH: u8 = 11;
    /// Hair of identity `i` is `HAIR + i`.
    pub const HAIR: u8 = 12;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("temporal length {0} is not 1 mod 4")]
    BadTemporalLength(usize),
    #[error("world has {identities} identities, need at least {needed}")]
    WorldTooSmall { identities: usize, needed: usize },
    #[error("invalid world config: {0}")]
    InvalidWorld(String),
    #[error("need at least one record")]
    Empty,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub identities: usize,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    pub frame_rate: u32,
    pub shape_dim: usize,
    pub expression_dim: usize,
    pub pose_dim: usize,
    /// Standard deviation of white noise added to every speech sample.
    pub speech_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            identities: 4,
            height: 32,
            width: 32,
            sample_rate: 1600,
            frame_rate: 25,
            shape_dim: 16,
            expression_dim: 8,
            pose_dim: 6,
            speech_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    /// Hair, build and voice words, in that order.
    pub attributes: [String; 3],
    pub base_freq: f64,
    pub shape: Vec<f64>,
    /// Face half-height and half-width as fractions of the frame height.
    pub face_radii: (f64, f64),
    pub hair_label: u8,
}

impl Identity {
    pub fn description(&self) -> String {
        format!("{} {} {}", self.attributes[0], self.attributes[1], self.attributes[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarWorld {
    pub config: WorldConfig,
    pub identities: Vec<Identity>,
}

impl AvatarWorld {
    pub fn new(config: WorldConfig) -> Result<Self, SynthError> {
        let c = &config;
        if c.identities == 0 || c.identities > MAX_IDENTITIES {
            return Err(SynthError::InvalidWorld(format!("identities must be in 1..={MAX_IDENTITIES}")));
        }
        if c.height < 16 || c.width < 16 {
            return Err(SynthError::InvalidWorld("frames must be at least 16×16".into()));
        }
        if c.frame_rate == 0 || !c.sample_rate.is_multiple_of(c.frame_rate) {
            return Err(SynthError::InvalidWorld("sample_rate must be a multiple of frame_rate".into()));
        }
        // highest word tone is 31 cycles per frame
        if c.frame_rate * 31 * 2 >= c.sample_rate {
            return Err(SynthError::InvalidWorld("sample rate too low for the voice frequencies".into()));
        }
        if !(c.speech_noise >= 0.0 && c.speech_noise.is_finite()) {
            return Err(SynthError::InvalidWorld("speech_noise must be finite and non-negative".into()));
        }
        if c.expression_dim == 0 || c.pose_dim < 2 {
            return Err(SynthError::InvalidWorld("need expression_dim ≥ 1 and pose_dim ≥ 2".into()));
        }
        let mut g = rng::seeded(rng::derive(c.seed, 0));
        let mut perms: [Vec<usize>; 3] = core::array::from_fn(|_| (0..MAX_IDENTITIES).collect());
        for p in perms.iter_mut() {
            p.shuffle(&mut g);
        }
        let identities = (0..c.identities)
            .map(|i| {
                let mut sg = rng::seeded(rng::derive(c.seed, 100 + i as u64));
                Identity {
                    attributes: [
                        HAIR_WORDS[perms[0][i]].into(),
                        BUILD_WORDS[perms[1][i]].into(),
                        VOICE_WORDS[perms[2][i]].into(),
                    ],
                    // a whole number of cycles per speech frame
                    base_freq: (c.frame_rate * (2 + 3 * i as u32)) as f64,
                    shape: (0..c.shape_dim).map(|_| rng::normal(&mut sg)).collect(),
                    face_radii: (0.26 + 0.08 * (i % 2) as f64, 0.2 + 0.07 * ((i / 2) % 2) as f64 + 0.02 * (i / 4) as f64),
                    hair_label: labels::HAIR + i as u8,
                }
            })
            .collect();
        Ok(Self { config, identities })
    }

    /// Identity whose voice frequency is closest to `freq`.
    pub fn identity_for_frequency(&self, freq: f64) -> usize {
        let mut best = 0;
        for (i, id) in self.identities.iter().enumerate() {
            if libm::fabs(id.base_freq - freq) < libm::fabs(self.identities[best].base_freq - freq) {
                best = i;
            }
        }
        best
    }

    /// Identity whose shape vector is closest to `shape`.
    pub fn identity_for_shape(&self, shape: &[f64]) -> usize {
        let d = |s: &[f64]| s.iter().zip(shape).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = 0;
        for (i, id) in self.identities.iter().enumerate() {
            if d(&id.shape) < d(&self.identities[best].shape) {
                best = i;
            }
        }
        best
    }
}

/// One clip of `frames` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub script: String,
    pub speech: SpeechSignal,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
    pub semantic: SemanticVideo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub identity: usize,
    pub frames: usize,
    pub description: String,
    pub shape: Vec<f64>,
    /// The clip immediately before `current`.
    pub past: Clip,
    pub current: Clip,
    /// Palette render of the current clip's first semantic frame.
    pub image: RgbImage,
}

impl SampleRecord {
    pub fn animation(&self) -> Result<AnimationParams, CodecError> {
        self.clip_animation(&self.current)
    }

    pub fn past_animation(&self) -> Result<AnimationParams, CodecError> {
        self.clip_animation(&self.past)
    }

    fn clip_animation(&self, clip: &Clip) -> Result<AnimationParams, CodecError> {
        AnimationParams::new(
            self.shape.clone(),
            clip.expression.clone(),
            clip.pose.clone(),
            self.frames,
            clip.speech.frame_rate,
        )
    }
}

fn word_amplitude(word: usize) -> f64 {
    0.6 + 0.05 * word as f64
}

/// Cycles per speech frame of the two tones carried by a script word. They
/// avoid every voice frequency, so the voice stays the strongest bin.
fn word_tones(word: usize) -> [u32; 2] {
    let free: Vec<u32> = (3u32..32).filter(|m| (m + 1) % 3 != 0 || *m > 23).collect();
    [free[word], free[word + SCRIPT_WORDS.len()]]
}

fn word_expression(word: usize, dim: usize) -> Vec<f64> {
    (0..dim).map(|j| libm::cos(0.7 * ((word + 1) * (j + 1)) as f64)).collect()
}

fn generate_clip(world: &AvatarWorld, identity: usize, g: &mut rng::Rng, frames: usize, t0: usize, phase: f64) -> Result<Clip, SynthError> {
    let c = &world.config;
    let id = &world.identities[identity];
    // one script word per latent frame group
    let n_words = latent_frames(frames as u32)? as usize;
    let words: Vec<usize> = (0..n_words).map(|_| g.random_range(0..SCRIPT_WORDS.len())).collect();
    let word_index = |t: usize| if t == 0 { 0 } else { (t - 1) / 4 + 1 };
    let word_at = |t: usize| words[word_index(t)];
    let script = words.iter().map(|&w| SCRIPT_WORDS[w]).collect::<Vec<_>>().join(" ");

    let window = (c.sample_rate / c.frame_rate) as usize;
    let two_pi = 2.0 * core::f64::consts::PI;
    // Random phases keep any single speech codeword from naming the
    // speaker; the word tones dominate the waveform shape while the voice
    // keeps the strongest spectral bin.
    let carrier = g.random_range(0.0..two_pi);
    let tone_phase: Vec<f64> = (0..2 * words.len()).map(|_| g.random_range(0.0..two_pi)).collect();
    let mut samples = Vec::with_capacity(frames * window);
    for t in 0..frames {
        let wi = word_index(t);
        let a = word_amplitude(words[wi]);
        let tones = word_tones(words[wi]);
        for n in 0..window {
            let s = (t * window + n) as f64 / c.sample_rate as f64;
            let mut v = a * libm::sin(two_pi * id.base_freq * s + carrier);
            for (k, m) in tones.iter().enumerate() {
                v += 0.5 * libm::sin(two_pi * (*m * c.frame_rate) as f64 * s + tone_phase[2 * wi + k]);
            }
            if c.speech_noise > 0.0 {
                v += c.speech_noise * rng::normal(g);
            }
            samples.push(v);
        }
    }
    let speech = SpeechSignal {
        samples,
        sample_rate: c.sample_rate,
        frame_rate: c.frame_rate,
    };

    let mut expression = Vec::with_capacity(frames * c.expression_dim);
    let mut prev = word_expression(word_at(0), c.expression_dim);
    for t in 0..frames {
        let target = word_expression(word_at(t), c.expression_dim);
        let cur: Vec<f64> = prev.iter().zip(&target).map(|(p, q)| 0.5 * p + 0.5 * q).collect();
        expression.extend_from_slice(&cur);
        prev = cur;
    }
    let mut pose = Vec::with_capacity(frames * c.pose_dim);
    for t in 0..frames {
        let u = two_pi * (t0 + t) as f64 / 40.0 + phase;
        for j in 0..c.pose_dim {
            pose.push(match j {
                0 => 1.5 * libm::sin(u),
                1 => 1.0 * libm::cos(u),
                _ => 0.2 * libm::sin(u * (j as f64) + phase),
            });
        }
    }

    let mut labels = Vec::with_capacity(frames * c.height * c.width);
    for t in 0..frames {
        let e0 = expression[t * c.expression_dim];
        draw_face(&mut labels, c.height, c.width, id, &pose[t * c.pose_dim..], e0);
    }
    Ok(Clip {
        script,
        speech,
        expression,
        pose,
        semantic: SemanticVideo::new(frames, c.height, c.width, labels)?,
    })
}

fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

fn draw_face(out: &mut Vec<u8>, h: usize, w: usize, id: &Identity, pose: &[f64], e0: f64) {
    let s = h as f64 / 32.0;
    let cy = h as f64 / 2.0 - 1.0 + pose[1] * s;
    let cx = w as f64 / 2.0 + pose[0] * s;
    let (ry, rx) = (id.face_radii.0 * h as f64, id.face_radii.1 * h as f64);
    let mouth_h = (0.6 + 0.6 * (1.0 + e0)) * s;
    let mouth_y = cy + 0.5 * ry;
    let eye_y = cy - 0.25 * ry;
    for yy in 0..h {
        for xx in 0..w {
            let (y, x) = (yy as f64 + 0.5, xx as f64 + 0.5);
            let label = if in_ellipse(y, x, mouth_y, cx, mouth_h, 0.45 * rx) {
                labels::MOUTH
            } else if in_ellipse(y, x, mouth_y, cx, mouth_h + s, 0.45 * rx + s) {
                labels::LIP
            } else if in_ellipse(y, x, eye_y, cx - 0.45 * rx, 1.2 * s, 1.6 * s) {
                labels::LEFT_EYE
            } else if in_ellipse(y, x, eye_y, cx + 0.45 * rx, 1.2 * s, 1.6 * s) {
                labels::RIGHT_EYE
            } else if in_ellipse(y, x, eye_y - 2.2 * s, cx - 0.45 * rx, 0.7 * s, 2.0 * s) {
                labels::LEFT_BROW
            } else if in_ellipse(y, x, eye_y - 2.2 * s, cx + 0.45 * rx, 0.7 * s, 2.0 * s) {
                labels::RIGHT_BROW
            } else if in_ellipse(y, x, cy + 0.12 * ry, cx, 1.5 * s, 1.0 * s) {
                labels::NOSE
            } else if in_ellipse(y, x, cy, cx, ry, rx) {
                labels::SKIN
            } else if y < cy && in_ellipse(y, x, cy - 0.1 * ry, cx, ry + 3.0 * s, rx + 2.5 * s) {
                id.hair_label
            } else if y > cy && libm::fabs(x - cx) < 0.45 * rx && y < cy + ry + 3.0 * s {
                labels::NECK
            } else if y > cy + ry + 3.0 * s - 0.01 {
                labels::CLOTH
            } else {
                labels::BACKGROUND
            };
            out.push(label);
        }
    }
}

/// One record. The identity and all content are drawn from `record_seed`.
pub fn generate_record(world: &AvatarWorld, record_seed: u64, frames: usize) -> Result<SampleRecord, SynthError> {
    if frames == 0 || !(frames - 1).is_multiple_of(4) {
        return Err(SynthError::BadTemporalLength(frames));
    }
    let mut g = rng::seeded(rng::derive(world.config.seed ^ 0x5eed, record_seed));
    let identity = g.random_range(0..world.identities.len());
    let phase = g.random_range(0.0..2.0 * core::f64::consts::PI);
    let past = generate_clip(world, identity, &mut g, frames, 0, phase)?;
    let current = generate_clip(world, identity, &mut g, frames, frames, phase)?;
    let palette = Palette::default();
    let c = &world.config;
    let image = RgbImage::new(c.height, c.width, embed_labels(current.semantic.frame(0), &palette)?)?;
    let id = &world.identities[identity];
    Ok(SampleRecord {
        seed: record_seed,
        identity,
        frames,
        description: id.description(),
        shape: id.shape.clone(),
        past,
        current,
        image,
    })
}

/// Records with seeds `base_seed..base_seed + n`.
pub fn generate_dataset(world: &AvatarWorld, n: usize, base_seed: u64, frames: usize) -> Result<Vec<SampleRecord>, SynthError> {
    if n == 0 {
        return Err(SynthError::Empty);
    }
    (0..n as u64).map(|i| generate_record(world, base_seed.wrapping_add(i), frames)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousSplit {
    pub train: Vec<SampleRecord>,
    pub held_out: Vec<SampleRecord>,
}

/// Records for the speech → semantic task, where the face layout depends
/// on identity and identity reaches speech only through its frequency.
/// One fifth (at least one record) is held out; the split is seeded.
pub fn ambiguous_task_dataset(world: &AvatarWorld, n: usize, seed: u64, frames: usize) -> Result<AmbiguousSplit, SynthError> {
    if world.identities.len() < 2 {
        return Err(SynthError::WorldTooSmall {
            identities: world.identities.len(),
            needed: 2,
        });
    }
    if n < 2 {
        return Err(SynthError::Empty);
    }
    let mut records = generate_dataset(world, n, seed, frames)?;
    records.shuffle(&mut rng::seeded(rng::derive(seed, 1)));
    let held = (n / 5).max(1);
    let held_out = records.split_off(n - held);
    Ok(AmbiguousSplit { train: records, held_out })
}

/// Frequency of the strongest DFT bin (excluding DC) of `samples`.
pub fn dominant_frequency(samples: &[f64], sample_rate: u32) -> f64 {
    let n = samples.len();
    let mut best = (0.0, 1);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &x) in samples.iter().enumerate() {
            let a = 2.0 * core::f64::consts::PI * (k * t % n) as f64 / n as f64;
            re += x * libm::cos(a);
            im -= x * libm::sin(a);
        }
        let p = re * re + im * im;
        if p > best.0 {
            best = (p, k);
        }
    }
    best.1 as f64 * sample_rate as f64 / n as f64
}
