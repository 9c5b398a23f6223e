//! Trained tokenizers on disk, and their quality metrics.
//!
//! ```text
//! shape.mmcb expression.mmcb pose.mmcb speech.mmcb semantic.mmcb
//! tokenizer.json   config, normalization statistics, image seed, layout
//! metrics.json     per-level distortion and codebook utilization
//! ```

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use mmtok_core::codecs::{
    image_patch_dim, normalize_animation, pool_latents, semantic_features, AnimationCodecs, NormalizationStats, Palette,
    SEMANTIC_FEATURE_DIM,
};
use mmtok_core::pipeline::Tokenizers;
use mmtok_core::quantize::{Codebook, LfqCodec, RvqCodec};
use mmtok_core::synth::SampleRecord;
use mmtok_core::vocab::RangeSpec;
use mmtok_core::TokenizerConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::formats::{codebooks_from_bytes, codebooks_to_bytes, rvq_from_bytes, rvq_to_bytes};

const RVQ_FILES: [&str; 4] = ["shape", "expression", "pose", "speech"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerMeta {
    config: TokenizerConfig,
    normalization: NormalizationStats,
    image_dim: usize,
    image_seed: u64,
    layout_hash: u64,
    layout: Vec<RangeSpec>,
}

fn rvqs(t: &Tokenizers) -> [&RvqCodec; 4] {
    [&t.animation.shape, &t.animation.expression, &t.animation.pose, &t.speech]
}

pub fn save(t: &Tokenizers, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, codec) in RVQ_FILES.iter().zip(rvqs(t)) {
        fs::write(dir.join(format!("{name}.mmcb")), rvq_to_bytes(codec)?)?;
    }
    fs::write(dir.join("semantic.mmcb"), codebooks_to_bytes(std::slice::from_ref(&t.semantic))?)?;
    let space = t.space()?;
    write_json(
        &dir.join("tokenizer.json"),
        &TokenizerMeta {
            config: t.config.clone(),
            normalization: t.animation.stats.clone(),
            image_dim: t.image.dim(),
            image_seed: t.image_seed,
            layout_hash: space.layout.hash(),
            layout: space.layout.ranges().to_vec(),
        },
    )
}

pub fn load(dir: &Path) -> Result<Tokenizers> {
    let meta: TokenizerMeta = read_json(&dir.join("tokenizer.json"))?;
    let read_rvq = |name: &str| -> Result<RvqCodec> {
        let p = dir.join(format!("{name}.mmcb"));
        rvq_from_bytes(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("decoding {}", p.display()))
    };
    let mut semantic = codebooks_from_bytes(&fs::read(dir.join("semantic.mmcb"))?)?;
    ensure!(semantic.len() == 1, "semantic.mmcb must hold exactly one codebook");
    let t = Tokenizers {
        animation: AnimationCodecs {
            shape: read_rvq("shape")?,
            expression: read_rvq("expression")?,
            pose: read_rvq("pose")?,
            stats: meta.normalization,
        },
        speech: read_rvq("speech")?,
        semantic: semantic.remove(0),
        image: LfqCodec::new(meta.image_dim, meta.config.image_code_bits as usize, meta.image_seed)?,
        image_seed: meta.image_seed,
        palette: Palette::default(),
        config: meta.config,
    };
    ensure!(
        t.space()?.layout.hash() == meta.layout_hash,
        "tokenizer.json layout does not match its config"
    );
    Ok(t)
}

/// Checks that `image.rgb` frames in the data fit the saved image codec.
pub fn check_image_size(t: &Tokenizers, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        ensure!(
            image_patch_dim(r.image.height, r.image.width)? == t.image.dim(),
            "record {} has a {}×{} image the codec was not built for",
            r.seed,
            r.image.height,
            r.image.width
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMetrics {
    pub name: String,
    pub vectors: usize,
    /// Mean squared residual after each level.
    pub distortion: Vec<f64>,
    /// Fraction of codewords chosen at each level.
    pub utilization: Vec<f64>,
}

/// The vectors each codebook was trained on, in `Tokenizers::train` order.
fn training_vectors(t: &Tokenizers, records: &[SampleRecord]) -> Result<[(String, Vec<f64>); 5]> {
    let (mut sh, mut ex, mut po, mut sp, mut se) = (vec![], vec![], vec![], vec![], vec![]);
    for r in records {
        for (a, clip) in [(r.past_animation()?, &r.past), (r.animation()?, &r.current)] {
            let n = normalize_animation(&a, &t.animation.stats)?;
            sh.extend_from_slice(&n.shape);
            ex.extend(pool_latents(&n.expression, n.frames, n.expression_dim())?);
            po.extend(pool_latents(&n.pose, n.frames, n.pose_dim())?);
            sp.extend(clip.speech.padded());
            se.extend(semantic_features(&clip.semantic)?);
        }
    }
    Ok([
        ("shape".into(), sh),
        ("expression".into(), ex),
        ("pose".into(), po),
        ("speech".into(), sp),
        ("semantic".into(), se),
    ])
}

fn rvq_metrics(name: String, codec: &RvqCodec, vectors: &[f64]) -> CodebookMetrics {
    let dim = codec.dim();
    let mut used: Vec<Vec<bool>> = codec.levels().iter().map(|c| vec![false; c.k()]).collect();
    for v in vectors.chunks_exact(dim) {
        if let Ok(ids) = codec.encode(v) {
            for (u, id) in used.iter_mut().zip(ids) {
                u[id as usize] = true;
            }
        }
    }
    CodebookMetrics {
        name,
        vectors: vectors.len() / dim,
        distortion: codec.level_distortion(vectors),
        utilization: used
            .iter()
            .map(|u| u.iter().filter(|&&b| b).count() as f64 / u.len() as f64)
            .collect(),
    }
}

fn codebook_metrics(name: String, cb: &Codebook, vectors: &[f64]) -> CodebookMetrics {
    CodebookMetrics {
        name,
        vectors: vectors.len() / SEMANTIC_FEATURE_DIM,
        distortion: vec![cb.distortion(vectors)],
        utilization: vec![cb.utilization(vectors)],
    }
}

pub fn metrics(t: &Tokenizers, records: &[SampleRecord]) -> Result<Vec<CodebookMetrics>> {
    let [sh, ex, po, sp, se] = training_vectors(t, records)?;
    Ok(vec![
        rvq_metrics(sh.0, &t.animation.shape, &sh.1),
        rvq_metrics(ex.0, &t.animation.expression, &ex.1),
        rvq_metrics(po.0, &t.animation.pose, &po.1),
        rvq_metrics(sp.0, &t.speech, &sp.1),
        codebook_metrics(se.0, &t.semantic, &se.1),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmtok_core::synth::{generate_dataset, AvatarWorld, WorldConfig};

    #[test]
    fn save_load_roundtrip() {
        let w = AvatarWorld::new(WorldConfig::default()).unwrap();
        let recs = generate_dataset(&w, 40, 0, 5).unwrap();
        let t = Tokenizers::train(&recs, &TokenizerConfig::compact(), 5, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save(&t, tmp.path()).unwrap();
        assert_eq!(load(tmp.path()).unwrap(), t);
        let m = metrics(&t, &recs).unwrap();
        assert_eq!(m.len(), 5);
        for c in &m {
            assert!(c.utilization.iter().all(|&u| u > 0.0 && u <= 1.0), "{c:?}");
            assert!(c.distortion.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{c:?}");
        }
    }
}
