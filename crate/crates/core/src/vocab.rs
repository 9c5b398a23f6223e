//! Unified vocabulary.
//!
//! All modalities share one global token-id space. The lowest ids are the
//! three special tokens; after them every `(modality, level)` pair owns a
//! contiguous half-open range `[start, start + size)`. RVQ modalities get one
//! range per residual level.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padding token.
pub const PAD_ID: u32 = 0;
/// Start of a serialized prompt.
pub const BOS_ID: u32 = 1;
/// Terminates each input field of a prompt.
pub const FIELD_SEP_ID: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Description,
    Script,
    Speech,
    Shape,
    Expression,
    Pose,
    Semantic,
    Image,
    /// Rendered from semantic video; never predicted as tokens.
    Video,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 9] = [
        ModalityKind::Description,
        ModalityKind::Script,
        ModalityKind::Speech,
        ModalityKind::Shape,
        ModalityKind::Expression,
        ModalityKind::Pose,
        ModalityKind::Semantic,
        ModalityKind::Image,
        ModalityKind::Video,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Description => "description",
            ModalityKind::Script => "script",
            ModalityKind::Speech => "speech",
            ModalityKind::Shape => "shape",
            ModalityKind::Expression => "expression",
            ModalityKind::Pose => "pose",
            ModalityKind::Semantic => "semantic",
            ModalityKind::Image => "image",
            ModalityKind::Video => "video",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Stable one-byte tag used by the token file format.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn is_text(self) -> bool {
        matches!(self, ModalityKind::Description | ModalityKind::Script)
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub kind: ModalityKind,
    pub level: u32,
    pub start: u32,
    pub size: u32,
}

impl RangeSpec {
    pub fn end(&self) -> u32 {
        self.start + self.size
    }

    pub fn contains(&self, global_id: u32) -> bool {
        global_id >= self.start && global_id < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("duplicate range for {kind} level {level}")]
    DuplicateRange { kind: ModalityKind, level: u32 },
    #[error("range for {kind} level {level} has zero size")]
    InvalidSize { kind: ModalityKind, level: u32 },
    #[error("video is rendered, it cannot own a vocabulary range")]
    VideoRange,
    #[error("layout exceeds the 32-bit id space")]
    IdSpaceOverflow,
    #[error("local id {local_id} outside {kind} level {level} (size {size})")]
    LocalIdOutOfRange {
        kind: ModalityKind,
        level: u32,
        local_id: u32,
        size: u32,
    },
    #[error("no range for {kind} level {level}")]
    NoSuchRange { kind: ModalityKind, level: u32 },
    #[error("token {0} is special or outside the vocabulary")]
    NotAModalityToken(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyLayout {
    ranges: Vec<RangeSpec>,
    total_size: u32,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_field_id: u32,
}

/// Packs the specials first and then each `(kind, level, size)` contiguously
/// in input order.
pub fn build_layout(specs: &[(ModalityKind, u32, u32)]) -> Result<VocabularyLayout, VocabError> {
    let mut ranges: Vec<RangeSpec> = Vec::with_capacity(specs.len());
    let mut next = NUM_SPECIALS;
    for &(kind, level, size) in specs {
        if kind == ModalityKind::Video {
            return Err(VocabError::VideoRange);
        }
        if size == 0 {
            return Err(VocabError::InvalidSize { kind, level });
        }
        if ranges.iter().any(|r| r.kind == kind && r.level == level) {
            return Err(VocabError::DuplicateRange { kind, level });
        }
        let end = next.checked_add(size).ok_or(VocabError::IdSpaceOverflow)?;
        ranges.push(RangeSpec {
            kind,
            level,
            start: next,
            size,
        });
        next = end;
    }
    Ok(VocabularyLayout {
        ranges,
        total_size: next,
        pad_id: PAD_ID,
        bos_id: BOS_ID,
        eos_field_id: FIELD_SEP_ID,
    })
}

impl VocabularyLayout {
    pub fn ranges(&self) -> &[RangeSpec] {
        &self.ranges
    }

    pub fn total_size(&self) -> u32 {
        self.total_size
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn range(&self, kind: ModalityKind, level: u32) -> Result<&RangeSpec, VocabError> {
        self.ranges
            .iter()
            .find(|r| r.kind == kind && r.level == level)
            .ok_or(VocabError::NoSuchRange { kind, level })
    }

    pub fn ranges_of(&self, kind: ModalityKind) -> impl Iterator<Item = &RangeSpec> + '_ {
        self.ranges.iter().filter(move |r| r.kind == kind)
    }

    pub fn globalize(&self, kind: ModalityKind, level: u32, local_id: u32) -> Result<u32, VocabError> {
        let r = self.range(kind, level)?;
        if local_id >= r.size {
            return Err(VocabError::LocalIdOutOfRange {
                kind,
                level,
                local_id,
                size: r.size,
            });
        }
        Ok(r.start + local_id)
    }

    pub fn localize(&self, global_id: u32) -> Result<(ModalityKind, u32, u32), VocabError> {
        let r = self.range_of(global_id)?;
        Ok((r.kind, r.level, global_id - r.start))
    }

    /// The range that owns `global_id`, found by binary search on `start`.
    pub fn range_of(&self, global_id: u32) -> Result<&RangeSpec, VocabError> {
        if self.is_special(global_id) || global_id >= self.total_size {
            return Err(VocabError::NotAModalityToken(global_id));
        }
        let idx = self.ranges.partition_point(|r| r.start <= global_id);
        // idx >= 1 because the first range starts right after the specials
        let r = &self.ranges[idx - 1];
        debug_assert!(r.contains(global_id));
        Ok(r)
    }

    /// FNV-1a over the canonical range list; token files carry it so a file
    /// is never decoded against a different layout.
    pub fn hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(&self.total_size.to_le_bytes());
        for r in &self.ranges {
            feed(&[r.kind.tag()]);
            feed(&r.level.to_le_bytes());
            feed(&r.start.to_le_bytes());
            feed(&r.size.to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn three_ranges() -> VocabularyLayout {
        build_layout(&[
            (ModalityKind::Script, 0, 7),
            (ModalityKind::Speech, 0, 5),
            (ModalityKind::Speech, 1, 3),
        ])
        .unwrap()
    }

    #[test]
    fn single_range_packing() {
        let layout = build_layout(&[(ModalityKind::Script, 0, 256)]).unwrap();
        let r = layout.range(ModalityKind::Script, 0).unwrap();
        assert_eq!((r.start, r.size), (3, 256));
        assert_eq!(layout.total_size(), 259);
    }

    #[test]
    fn speech_levels_are_disjoint() {
        let specs: Vec<_> = (0..4).map(|l| (ModalityKind::Speech, l, 1024)).collect();
        let layout = build_layout(&specs).unwrap();
        let total: u32 = layout.ranges_of(ModalityKind::Speech).map(|r| r.size).sum();
        assert_eq!(total, 4096);
        for w in layout.ranges().windows(2) {
            assert_eq!(w[0].end(), w[1].start);
        }
    }

    #[test]
    fn image_range_is_two_to_the_eighteen() {
        let layout = build_layout(&[(ModalityKind::Script, 0, 257), (ModalityKind::Image, 0, 1 << 18)]).unwrap();
        let r = layout.range(ModalityKind::Image, 0).unwrap();
        assert_eq!(r.end() - r.start, 262_144);
        assert_eq!(layout.localize(r.start).unwrap(), (ModalityKind::Image, 0, 0));
        assert_eq!(layout.localize(r.end() - 1).unwrap(), (ModalityKind::Image, 0, 262_143));
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            build_layout(&[(ModalityKind::Pose, 1, 4), (ModalityKind::Pose, 1, 4)]),
            Err(VocabError::DuplicateRange {
                kind: ModalityKind::Pose,
                level: 1
            })
        );
        assert_eq!(
            build_layout(&[(ModalityKind::Pose, 0, 0)]),
            Err(VocabError::InvalidSize {
                kind: ModalityKind::Pose,
                level: 0
            })
        );
        assert_eq!(build_layout(&[(ModalityKind::Video, 0, 4)]), Err(VocabError::VideoRange));
        assert_eq!(
            build_layout(&[(ModalityKind::Pose, 0, u32::MAX)]),
            Err(VocabError::IdSpaceOverflow)
        );
    }

    #[test]
    fn globalize_offsets() {
        let layout = build_layout(&[(ModalityKind::Script, 0, 253), (ModalityKind::Speech, 0, 10)]).unwrap();
        // speech starts at 3 + 253 = 256
        assert_eq!(layout.globalize(ModalityKind::Speech, 0, 5).unwrap(), 261);
        for r in layout.ranges() {
            assert_eq!(layout.globalize(r.kind, r.level, 0).unwrap(), r.start);
        }
        assert!(matches!(
            layout.globalize(ModalityKind::Speech, 0, 10),
            Err(VocabError::LocalIdOutOfRange { .. })
        ));
        assert!(matches!(
            layout.globalize(ModalityKind::Pose, 0, 0),
            Err(VocabError::NoSuchRange { .. })
        ));
    }

    #[test]
    fn localize_exhaustive_and_specials() {
        let layout = three_ranges();
        assert_eq!(layout.localize(PAD_ID), Err(VocabError::NotAModalityToken(PAD_ID)));
        assert_eq!(layout.localize(BOS_ID), Err(VocabError::NotAModalityToken(BOS_ID)));
        assert_eq!(
            layout.localize(layout.total_size()),
            Err(VocabError::NotAModalityToken(layout.total_size()))
        );
        // brute-force owner scan against the binary search
        for id in NUM_SPECIALS..layout.total_size() {
            let owners: Vec<_> = layout.ranges().iter().filter(|r| r.contains(id)).collect();
            assert_eq!(owners.len(), 1, "id {id} owned by {} ranges", owners.len());
            let (k, l, i) = layout.localize(id).unwrap();
            assert_eq!((k, l, i), (owners[0].kind, owners[0].level, id - owners[0].start));
            assert_eq!(layout.globalize(k, l, i).unwrap(), id);
        }
        let last = layout.total_size() - 1;
        assert_eq!(layout.localize(last).unwrap(), (ModalityKind::Speech, 1, 2));
    }

    #[test]
    fn random_roundtrip() {
        let layout = three_ranges();
        let mut rng = crate::rng::seeded(11);
        for _ in 0..10_000 {
            let r = layout.ranges()[rng.random_range(0..layout.ranges().len())];
            let local = rng.random_range(0..r.size);
            let g = layout.globalize(r.kind, r.level, local).unwrap();
            assert_eq!(layout.localize(g).unwrap(), (r.kind, r.level, local));
        }
    }

    #[test]
    fn deterministic_and_hash_sensitive() {
        let a = three_ranges();
        let b = three_ranges();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = build_layout(&[(ModalityKind::Script, 0, 7), (ModalityKind::Speech, 0, 6)]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
