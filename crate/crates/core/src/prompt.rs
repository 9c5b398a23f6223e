//! Structured prompts: task instances serialized into one token sequence of
//! text headers and modality payloads, and parsed back.
//!
//! ```text
//! BOS
//! ( "input <kind> <state> <dims>:" payload FIELD_SEP )*
//! "output <kind> <state> <dims>:" payload?
//! ```
//!
//! Header characters are script-range byte tokens. Payload lengths follow
//! from the declared dims, so parsing never has to guess where a payload
//! ends.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{CodecError, Dims, TokenSpace};
use crate::rng::Rng;
use crate::vocab::{ModalityKind, BOS_ID, FIELD_SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    Past,
    Current,
    Invariant,
}

impl State {
    pub const ALL: [State; 3] = [State::Past, State::Current, State::Invariant];

    pub fn name(self) -> &'static str {
        match self {
            State::Past => "past",
            State::Current => "current",
            State::Invariant => "invariant",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// One-letter tag: `p`, `c`, `t`.
    pub fn tag(self) -> char {
        match self {
            State::Past => 'p',
            State::Current => 'c',
            State::Invariant => 't',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.tag() == c)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("{kind} cannot appear with state {state:?}")]
    InvalidRef { kind: ModalityKind, state: State },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("parse error at token {position}: {reason}")]
    ParseError { position: usize, reason: String },
    #[error("token at position {position} is outside the ranges of {kind}")]
    RangeViolation { kind: ModalityKind, position: usize },
    #[error("sequence has no output section")]
    NoOutputSection,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A modality together with its temporal state. Serialized as the string
/// form, e.g. `"speech(c)"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ModalityRef {
    pub kind: ModalityKind,
    pub state: State,
}

impl ModalityRef {
    /// Static kinds take `invariant`, temporal kinds take `past` or
    /// `current`; video never appears in a prompt.
    pub fn new(kind: ModalityKind, state: State) -> Result<Self, PromptError> {
        let r = Self { kind, state };
        if r.is_valid() {
            Ok(r)
        } else {
            Err(PromptError::InvalidRef { kind, state })
        }
    }

    pub fn is_valid(self) -> bool {
        use ModalityKind::*;
        match self.kind {
            Image | Description | Shape => self.state == State::Invariant,
            Script | Speech | Expression | Pose | Semantic => self.state != State::Invariant,
            Video => false,
        }
    }

    /// Invariant for static kinds, current otherwise.
    pub fn default_for(kind: ModalityKind) -> Self {
        let state = match kind {
            ModalityKind::Image | ModalityKind::Description | ModalityKind::Shape => State::Invariant,
            _ => State::Current,
        };
        Self { kind, state }
    }

    pub fn current(kind: ModalityKind) -> Self {
        Self {
            kind,
            state: State::Current,
        }
    }

    pub fn past(kind: ModalityKind) -> Self {
        Self { kind, state: State::Past }
    }

    pub fn invariant(kind: ModalityKind) -> Self {
        Self {
            kind,
            state: State::Invariant,
        }
    }
}

/// `speech(c)`, `shape(t)`, `script(p)`.
impl fmt::Display for ModalityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind, self.state.tag())
    }
}

impl FromStr for ModalityRef {
    type Err = PromptError;

    /// Accepts `kind(x)` with a state tag, or a bare kind name that gets
    /// its default state.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::ParseError {
            position: 0,
            reason: format!("bad modality reference {s:?}"),
        };
        let s = s.trim();
        let (name, state) = match s.split_once('(') {
            Some((name, rest)) => {
                let tag = rest.strip_suffix(')').ok_or_else(bad)?;
                let mut chars = tag.chars();
                let (Some(c), None) = (chars.next(), chars.next()) else {
                    return Err(bad());
                };
                (name, Some(State::from_tag(c).ok_or_else(bad)?))
            }
            None => (s, None),
        };
        let kind = ModalityKind::from_name(name).ok_or_else(bad)?;
        match state {
            Some(st) => Self::new(kind, st),
            None => Ok(Self::default_for(kind)),
        }
    }
}

impl From<ModalityRef> for String {
    fn from(r: ModalityRef) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for ModalityRef {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One modality inside a prompt. The payload holds global ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: ModalityRef,
    pub dims: Dims,
    pub payload: Vec<u32>,
}

/// Conditions plus the declared output. `output_payload` is empty for an
/// inference prompt and exactly `token_count(output)` long otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub conditions: Vec<Segment>,
    pub output: ModalityRef,
    pub output_dims: Dims,
    pub output_payload: Vec<u32>,
}

impl TaskInstance {
    pub fn expected_output_len(&self, space: &TokenSpace) -> Result<usize, PromptError> {
        Ok(space.token_count(self.output.kind, self.output_dims)?)
    }

    /// The same instance with the output payload removed.
    pub fn as_inference(&self) -> Self {
        Self {
            output_payload: Vec::new(),
            ..self.clone()
        }
    }

    pub fn condition(&self, r: ModalityRef) -> Option<&Segment> {
        self.conditions.iter().find(|s| s.modality == r)
    }

    pub fn validate(&self, space: &TokenSpace) -> Result<(), PromptError> {
        let invalid = |m: String| Err(PromptError::InvalidInstance(m));
        for (i, seg) in self.conditions.iter().enumerate() {
            if !seg.modality.is_valid() {
                return invalid(format!("condition {i} has invalid reference {}", seg.modality));
            }
            if seg.modality == self.output {
                return invalid(format!("output {} is also a condition", self.output));
            }
            if self.conditions[..i].iter().any(|s| s.modality == seg.modality) {
                return invalid(format!("duplicate condition {}", seg.modality));
            }
            check_payload(space, seg.modality.kind, seg.dims, &seg.payload, false)
                .map_err(|e| PromptError::InvalidInstance(format!("condition {}: {e}", seg.modality)))?;
        }
        if !self.output.is_valid() {
            return invalid(format!("invalid output reference {}", self.output));
        }
        check_payload(space, self.output.kind, self.output_dims, &self.output_payload, true)
            .map_err(|e| PromptError::InvalidInstance(format!("output {}: {e}", self.output)))
    }
}

fn check_payload(
    space: &TokenSpace,
    kind: ModalityKind,
    dims: Dims,
    payload: &[u32],
    may_be_empty: bool,
) -> Result<(), PromptError> {
    let n = space.token_count(kind, dims)?;
    if payload.is_empty() && may_be_empty {
        return Ok(());
    }
    if payload.len() != n {
        return Err(CodecError::TokenCountMismatch {
            expected: n,
            got: payload.len(),
        }
        .into());
    }
    space.localize_payload(kind, dims, payload)?;
    Ok(())
}

/// A serialized prompt and the index of its first output-payload token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Serialized {
    pub tokens: Vec<u32>,
    pub prefix_len: usize,
}

pub fn header_text(direction: &str, r: ModalityRef, dims: Dims) -> String {
    format!("{direction} {} {} {dims}:", r.kind, r.state.name())
}

fn push_header(out: &mut Vec<u32>, space: &TokenSpace, text: &str) {
    out.extend(text.bytes().map(|b| space.text_token(b)));
}

pub fn serialize(inst: &TaskInstance, space: &TokenSpace) -> Result<Serialized, PromptError> {
    inst.validate(space)?;
    let mut tokens = alloc::vec![BOS_ID];
    for seg in &inst.conditions {
        push_header(&mut tokens, space, &header_text("input", seg.modality, seg.dims));
        tokens.extend_from_slice(&seg.payload);
        tokens.push(FIELD_SEP_ID);
    }
    push_header(&mut tokens, space, &header_text("output", inst.output, inst.output_dims));
    let prefix_len = tokens.len();
    tokens.extend_from_slice(&inst.output_payload);
    Ok(Serialized { tokens, prefix_len })
}

struct Header {
    output: bool,
    modality: ModalityRef,
    dims: Dims,
}

fn read_header(tokens: &[u32], start: usize, space: &TokenSpace) -> Result<(Header, usize), PromptError> {
    let mut text = String::new();
    let mut pos = start;
    loop {
        let Some(&t) = tokens.get(pos) else {
            return Err(PromptError::ParseError {
                position: pos,
                reason: "sequence ends inside a header".into(),
            });
        };
        let Some(b) = space.header_byte(t) else {
            return Err(PromptError::ParseError {
                position: pos,
                reason: format!("token {t} is not a header character"),
            });
        };
        pos += 1;
        if b == b':' {
            break;
        }
        text.push(b as char);
    }
    let err = |reason: String| PromptError::ParseError { position: start, reason };
    let words: Vec<&str> = text.split(' ').collect();
    let [dir, kind, state, dims] = words[..] else {
        return Err(err(format!("malformed header {text:?}")));
    };
    let output = match dir {
        "input" => false,
        "output" => true,
        _ => return Err(err(format!("unknown direction {dir:?}"))),
    };
    let kind = ModalityKind::from_name(kind).ok_or_else(|| err(format!("unknown modality {kind:?}")))?;
    let state = State::from_name(state).ok_or_else(|| err(format!("unknown state {state:?}")))?;
    let modality = ModalityRef::new(kind, state).map_err(|e| err(format!("{e}")))?;
    let dims = Dims::parse(kind, dims).ok_or_else(|| err(format!("bad dims {dims:?}")))?;
    Ok((Header { output, modality, dims }, pos))
}

fn read_payload(
    tokens: &[u32],
    start: usize,
    n: usize,
    kind: ModalityKind,
    dims: Dims,
    space: &TokenSpace,
) -> Result<Vec<u32>, PromptError> {
    if tokens.len() < start + n {
        return Err(PromptError::ParseError {
            position: tokens.len(),
            reason: format!("payload of {kind} needs {n} tokens"),
        });
    }
    let payload = &tokens[start..start + n];
    for (i, &t) in payload.iter().enumerate() {
        if !space.allowed(kind, dims, i)?.contains(&t) {
            return Err(PromptError::RangeViolation {
                kind,
                position: start + i,
            });
        }
    }
    Ok(payload.to_vec())
}

/// Inverse of [`serialize`], returning the instance and its prefix length.
pub fn parse_with_prefix(tokens: &[u32], space: &TokenSpace) -> Result<(TaskInstance, usize), PromptError> {
    match tokens.first() {
        Some(&BOS_ID) => {}
        Some(_) => {
            return Err(PromptError::ParseError {
                position: 0,
                reason: "missing BOS".into(),
            })
        }
        None => return Err(PromptError::NoOutputSection),
    }
    let mut pos = 1;
    let mut conditions: Vec<Segment> = Vec::new();
    loop {
        if pos == tokens.len() {
            return Err(PromptError::NoOutputSection);
        }
        let header_start = pos;
        let (h, after) = read_header(tokens, pos, space)?;
        let n = space.token_count(h.modality.kind, h.dims)?;
        if h.output {
            let rest = tokens.len() - after;
            let payload = if rest == 0 {
                Vec::new()
            } else if rest == n {
                read_payload(tokens, after, n, h.modality.kind, h.dims, space)?
            } else {
                return Err(PromptError::ParseError {
                    position: after + rest.min(n),
                    reason: format!("output payload has {rest} tokens, expected 0 or {n}"),
                });
            };
            let inst = TaskInstance {
                conditions,
                output: h.modality,
                output_dims: h.dims,
                output_payload: payload,
            };
            inst.validate(space).map_err(|e| match e {
                PromptError::InvalidInstance(reason) => PromptError::ParseError {
                    position: header_start,
                    reason,
                },
                other => other,
            })?;
            return Ok((inst, after));
        }
        let payload = read_payload(tokens, after, n, h.modality.kind, h.dims, space)?;
        pos = after + n;
        match tokens.get(pos) {
            Some(&FIELD_SEP_ID) => pos += 1,
            _ => {
                return Err(PromptError::ParseError {
                    position: pos,
                    reason: "expected field separator".into(),
                })
            }
        }
        conditions.push(Segment {
            modality: h.modality,
            dims: h.dims,
            payload,
        });
    }
}

pub fn parse(tokens: &[u32], space: &TokenSpace) -> Result<TaskInstance, PromptError> {
    parse_with_prefix(tokens, space).map(|(inst, _)| inst)
}

/// Half-open span of the output payload: `(prefix_len, len)`.
pub fn target_span(tokens: &[u32], prefix_len: usize, space: &TokenSpace) -> Result<(usize, usize), PromptError> {
    let (_, p) = parse_with_prefix(tokens, space)?;
    if p != prefix_len {
        return Err(PromptError::ParseError {
            position: prefix_len,
            reason: format!("output payload starts at {p}"),
        });
    }
    Ok((p, tokens.len()))
}

/// Small dims for `kind`, chosen so payloads stay short.
pub fn random_dims(kind: ModalityKind, rng: &mut Rng, max_text: u32) -> Dims {
    match kind {
        ModalityKind::Description | ModalityKind::Script => Dims::Text {
            bytes: rng.random_range(0..=max_text),
        },
        ModalityKind::Speech => Dims::Frames {
            frames: rng.random_range(1..=6),
        },
        ModalityKind::Expression | ModalityKind::Pose => Dims::Frames {
            frames: 1 + 4 * rng.random_range(0..3),
        },
        ModalityKind::Shape => Dims::Static,
        ModalityKind::Semantic | ModalityKind::Video => Dims::Video {
            frames: 1 + 4 * rng.random_range(0..2),
            height: 8 * rng.random_range(1..3),
            width: 8 * rng.random_range(1..3),
        },
        ModalityKind::Image => Dims::Image {
            height: 16 * rng.random_range(1..3),
            width: 16 * rng.random_range(1..3),
        },
    }
}

/// Uniform random admissible payload (global ids).
pub fn random_payload(space: &TokenSpace, kind: ModalityKind, dims: Dims, rng: &mut Rng) -> Result<Vec<u32>, PromptError> {
    let n = space.token_count(kind, dims)?;
    (0..n)
        .map(|i| {
            let r = space.allowed(kind, dims, i)?;
            Ok(rng.random_range(r))
        })
        .collect()
}

/// A random valid instance: up to four distinct conditions and an output
/// that is not one of them; the output payload is filled with probability
/// 3/4.
pub fn random_instance(space: &TokenSpace, rng: &mut Rng, max_text: u32) -> TaskInstance {
    let refs = crate::tasks::full_modality_set();
    let mut picked: Vec<ModalityRef> = Vec::new();
    let n_cond = rng.random_range(0..=4);
    let output = refs[rng.random_range(0..refs.len())];
    while picked.len() < n_cond {
        let r = refs[rng.random_range(0..refs.len())];
        if r != output && !picked.contains(&r) {
            picked.push(r);
        }
    }
    let conditions = picked
        .into_iter()
        .map(|r| {
            let dims = random_dims(r.kind, rng, max_text);
            let payload = random_payload(space, r.kind, dims, rng).expect("valid random dims");
            Segment {
                modality: r,
                dims,
                payload,
            }
        })
        .collect();
    let output_dims = random_dims(output.kind, rng, max_text);
    let output_payload = if rng.random_range(0..4) == 0 {
        Vec::new()
    } else {
        random_payload(space, output.kind, output_dims, rng).expect("valid random dims")
    };
    TaskInstance {
        conditions,
        output,
        output_dims,
        output_payload,
    }
}
