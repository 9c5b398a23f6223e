//! Semantic video tokenizer: causal temporal grouping, an 8×8 cell grid per
//! latent frame and one codeword per cell over label histograms.

use alloc::vec;
use alloc::vec::Vec;

use super::animation::latent_groups;
use super::{latent_frames, CodecError, SemanticVideo, NUM_LABELS, SEMANTIC_GRID, TEMPORAL_STRIDE};
use crate::quantize::Codebook;

/// One 21-bin histogram per frame slot of a temporal group.
pub const SEMANTIC_FEATURE_DIM: usize = TEMPORAL_STRIDE as usize * NUM_LABELS;

fn check_video(video: &SemanticVideo) -> Result<(usize, usize), CodecError> {
    latent_frames(video.frames as u32)?;
    let g = SEMANTIC_GRID as usize;
    if video.height == 0 || video.width == 0 || !video.height.is_multiple_of(g) || !video.width.is_multiple_of(g) {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "{}x{} is not divisible into an {g}x{g} grid",
            video.height,
            video.width
        )));
    }
    Ok((video.height / g, video.width / g))
}

/// Cell features in token order (latent-major, then row-major cells). Each
/// feature is four normalized label histograms, one per frame slot; the lone
/// first frame fills all four slots.
pub fn semantic_features(video: &SemanticVideo) -> Result<Vec<f64>, CodecError> {
    let (ch, cw) = check_video(video)?;
    let g = SEMANTIC_GRID as usize;
    let stride = TEMPORAL_STRIDE as usize;
    let per_cell = 1.0 / (ch * cw) as f64;
    let mut out = Vec::new();
    for group in latent_groups(video.frames) {
        for gy in 0..g {
            for gx in 0..g {
                let mut feat = vec![0.0; SEMANTIC_FEATURE_DIM];
                for slot in 0..stride {
                    let t = if group.len() == 1 { group.start } else { group.start + slot };
                    let hist = &mut feat[slot * NUM_LABELS..(slot + 1) * NUM_LABELS];
                    for y in gy * ch..(gy + 1) * ch {
                        for x in gx * cw..(gx + 1) * cw {
                            hist[video.at(t, y, x) as usize] += per_cell;
                        }
                    }
                }
                out.extend(feat);
            }
        }
    }
    Ok(out)
}

pub fn encode_semantic_video(video: &SemanticVideo, codebook: &Codebook) -> Result<Vec<u32>, CodecError> {
    let feats = semantic_features(video)?;
    if codebook.dim() != SEMANTIC_FEATURE_DIM {
        return Err(crate::quantize::QuantError::DimMismatch {
            expected: SEMANTIC_FEATURE_DIM,
            got: codebook.dim(),
        }
        .into());
    }
    Ok(feats
        .chunks_exact(SEMANTIC_FEATURE_DIM)
        .map(|f| codebook.nearest(f).0 as u32)
        .collect())
}

/// Each token's codeword gives a label distribution per frame slot; every
/// pixel of the cell takes the argmax label (ties to the lower label).
pub fn decode_semantic_video(
    tokens: &[u32],
    codebook: &Codebook,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<SemanticVideo, CodecError> {
    let mut out = SemanticVideo::filled(frames, height, width, 0)?;
    let (ch, cw) = check_video(&out)?;
    let g = SEMANTIC_GRID as usize;
    let lat = latent_frames(frames as u32)? as usize;
    if tokens.len() != lat * g * g {
        return Err(CodecError::TokenCountMismatch {
            expected: lat * g * g,
            got: tokens.len(),
        });
    }
    if codebook.dim() != SEMANTIC_FEATURE_DIM {
        return Err(crate::quantize::QuantError::DimMismatch {
            expected: SEMANTIC_FEATURE_DIM,
            got: codebook.dim(),
        }
        .into());
    }
    for (gi, group) in latent_groups(frames).enumerate() {
        for cell in 0..g * g {
            let id = tokens[gi * g * g + cell] as usize;
            if id >= codebook.k() {
                return Err(crate::quantize::QuantError::CodeOutOfRange {
                    level: 0,
                    id: id as u32,
                    k: codebook.k(),
                }
                .into());
            }
            let cw_vec = codebook.entry(id);
            let (gy, gx) = (cell / g, cell % g);
            for (slot, t) in group.clone().enumerate() {
                let hist = &cw_vec[slot * NUM_LABELS..(slot + 1) * NUM_LABELS];
                let mut label = 0;
                for (l, &v) in hist.iter().enumerate() {
                    if v > hist[label] {
                        label = l;
                    }
                }
                for y in gy * ch..(gy + 1) * ch {
                    let row = (t * height + y) * width;
                    out.labels[row + gx * cw..row + (gx + 1) * cw].fill(label as u8);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::{Dims, TokenizerConfig};
    use crate::quantize::train_codebook;
    use crate::rng;
    use crate::vocab::ModalityKind;
    use rand::Rng as _;

    fn blobs(seed: u64, frames: usize) -> SemanticVideo {
        let mut r = rng::seeded(seed);
        let (cx, cy, rad) = (r.random_range(8..24), r.random_range(8..24), r.random_range(3..8) as i64);
        let label = r.random_range(1..21u8);
        let mut labels = Vec::new();
        for t in 0..frames {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let dx = x - cx as i64 - (t as i64 % 3);
                    let dy = y - cy as i64;
                    labels.push(if dx * dx + dy * dy <= rad * rad { label } else { 0 });
                }
            }
        }
        SemanticVideo::new(frames, 32, 32, labels).unwrap()
    }

    fn accuracy(a: &SemanticVideo, b: &SemanticVideo) -> f64 {
        a.labels.iter().zip(&b.labels).filter(|(x, y)| x == y).count() as f64 / a.labels.len() as f64
    }

    #[test]
    fn token_count_matches_arithmetic() {
        let v = SemanticVideo::filled(29, 128, 128, 3).unwrap();
        let f = semantic_features(&v).unwrap();
        assert_eq!(f.len() / SEMANTIC_FEATURE_DIM, 512);
        let dims = Dims::Video {
            frames: 29,
            height: 128,
            width: 128,
        };
        assert_eq!(TokenizerConfig::default().token_count(ModalityKind::Semantic, dims).unwrap(), 512);
        assert!(matches!(
            semantic_features(&SemanticVideo::filled(4, 32, 32, 0).unwrap()),
            Err(CodecError::BadTemporalLength(4))
        ));
    }

    #[test]
    fn constant_video_single_code_and_exact_roundtrip() {
        let v = SemanticVideo::filled(9, 32, 32, 7).unwrap();
        let feats = semantic_features(&v).unwrap();
        let cb = train_codebook(&feats, SEMANTIC_FEATURE_DIM, 1, 5, 0).unwrap();
        let toks = encode_semantic_video(&v, &cb).unwrap();
        assert!(toks.iter().all(|&t| t == toks[0]));
        assert_eq!(decode_semantic_video(&toks, &cb, 9, 32, 32).unwrap(), v);
    }

    #[test]
    fn trained_codebook_beats_single_codeword() {
        let vids: Vec<_> = (0..12).map(|s| blobs(s, 9)).collect();
        let feats: Vec<f64> = vids.iter().flat_map(|v| semantic_features(v).unwrap()).collect();
        let big = train_codebook(&feats, SEMANTIC_FEATURE_DIM, 64, 15, 1).unwrap();
        let one = train_codebook(&feats, SEMANTIC_FEATURE_DIM, 1, 15, 1).unwrap();
        for v in &vids {
            let rt = |cb: &Codebook| {
                let t = encode_semantic_video(v, cb).unwrap();
                assert!(t.iter().all(|&id| (id as usize) < cb.k()));
                decode_semantic_video(&t, cb, 9, 32, 32).unwrap()
            };
            let (a_big, a_one) = (accuracy(v, &rt(&big)), accuracy(v, &rt(&one)));
            assert!(a_big >= a_one, "{a_big} < {a_one}");
            assert!(rt(&big).labels.iter().all(|&l| (l as usize) < NUM_LABELS));
        }
    }

    #[test]
    fn four_times_fewer_tokens_than_image_grid() {
        let cfg = TokenizerConfig::default();
        for l in (1..=61u32).step_by(4) {
            let sem = cfg
                .token_count(
                    ModalityKind::Semantic,
                    Dims::Video {
                        frames: l,
                        height: 128,
                        width: 128,
                    },
                )
                .unwrap();
            let lat = latent_frames(l).unwrap() as usize;
            assert_eq!(sem, lat * 64);
            assert_eq!(sem * 4, lat * cfg.token_count(ModalityKind::Image, Dims::Image { height: 256, width: 256 }).unwrap());
        }
    }
}
