//! Core of a unified multimodal token pipeline for talking-avatar generation.
//!
//! Every modality of an avatar clip (description, script, speech, 3DMM-style
//! animation, semantic video, reference image) is quantized into discrete
//! tokens, mapped into one shared vocabulary, serialized into structured
//! prompts and consumed by a small prefix language model that generates one
//! modality at a time.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, dataset IO and
//! the command line live in the companion `mmtok` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codecs;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod quantize;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tasks;
pub mod vocab;

pub use codecs::{Dims, TokenSpace, TokenizerConfig};
pub use prompt::{ModalityRef, Segment, State, TaskInstance};
pub use vocab::{ModalityKind, VocabularyLayout};
