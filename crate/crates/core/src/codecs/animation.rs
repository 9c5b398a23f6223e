//! Animation tokenizer: per-dimension normalization, causal 4× temporal
//! pooling and one RVQ per parameter group.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{latent_frames, AnimationParams, CodecError, TokenizerConfig, TEMPORAL_STRIDE};
use crate::quantize::{train_rvq, QuantError, RvqCodec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DimStats {
    /// Population mean/std of `dim`-wide rows. Zero-variance dimensions get
    /// std 1.
    pub fn fit(rows: &[f64], dim: usize) -> Result<Self, CodecError> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(CodecError::EmptyInput);
        }
        let n = (rows.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = libm::sqrt(s / n);
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, rows: &[f64], forward: bool) -> Result<Vec<f64>, CodecError> {
        let dim = self.dim();
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(QuantError::DimMismatch {
                expected: dim,
                got: rows.len(),
            }
            .into());
        }
        Ok(rows
            .chunks_exact(dim)
            .flat_map(|r| {
                r.iter().enumerate().map(|(i, v)| {
                    if forward {
                        (v - self.mean[i]) / self.std[i]
                    } else {
                        v * self.std[i] + self.mean[i]
                    }
                })
            })
            .collect())
    }
}

/// Independent statistics for shape, expression and pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub shape: DimStats,
    pub expression: DimStats,
    pub pose: DimStats,
}

impl NormalizationStats {
    pub fn fit(data: &[AnimationParams]) -> Result<Self, CodecError> {
        let first = data.first().ok_or(CodecError::EmptyInput)?;
        let (es, ee, ep) = (first.shape.len(), first.expression_dim(), first.pose_dim());
        let mut sh = Vec::new();
        let mut ex = Vec::new();
        let mut po = Vec::new();
        for a in data {
            if a.shape.len() != es || a.expression_dim() != ee || a.pose_dim() != ep {
                return Err(CodecError::ShapeMismatch("animation dims differ across records".into()));
            }
            sh.extend_from_slice(&a.shape);
            ex.extend_from_slice(&a.expression);
            po.extend_from_slice(&a.pose);
        }
        Ok(Self {
            shape: DimStats::fit(&sh, es)?,
            expression: DimStats::fit(&ex, ee)?,
            pose: DimStats::fit(&po, ep)?,
        })
    }
}

fn check_dims(params: &AnimationParams, stats: &NormalizationStats) -> Result<(), CodecError> {
    for (expected, got) in [
        (stats.shape.dim(), params.shape.len()),
        (stats.expression.dim(), params.expression_dim()),
        (stats.pose.dim(), params.pose_dim()),
    ] {
        if expected != got {
            return Err(QuantError::DimMismatch { expected, got }.into());
        }
    }
    Ok(())
}

pub fn normalize_animation(params: &AnimationParams, stats: &NormalizationStats) -> Result<AnimationParams, CodecError> {
    check_dims(params, stats)?;
    Ok(AnimationParams {
        shape: stats.shape.apply(&params.shape, true)?,
        expression: stats.expression.apply(&params.expression, true)?,
        pose: stats.pose.apply(&params.pose, true)?,
        ..params.clone()
    })
}

pub fn denormalize_animation(params: &AnimationParams, stats: &NormalizationStats) -> Result<AnimationParams, CodecError> {
    check_dims(params, stats)?;
    Ok(AnimationParams {
        shape: stats.shape.apply(&params.shape, false)?,
        expression: stats.expression.apply(&params.expression, false)?,
        pose: stats.pose.apply(&params.pose, false)?,
        ..params.clone()
    })
}

/// Frame ranges of each latent: `[0,1)`, then `[1,5)`, `[5,9)`, ...
pub(crate) fn latent_groups(frames: usize) -> impl Iterator<Item = core::ops::Range<usize>> {
    let stride = TEMPORAL_STRIDE as usize;
    (0..(frames - 1) / stride + 1).map(move |g| if g == 0 { 0..1 } else { 1 + (g - 1) * stride..1 + g * stride })
}

/// Mean-pools `frames × dim` rows into latent rows.
pub fn pool_latents(rows: &[f64], frames: usize, dim: usize) -> Result<Vec<f64>, CodecError> {
    latent_frames(frames as u32)?;
    if rows.len() != frames * dim {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "{} values for {frames} frames of width {dim}",
            rows.len()
        )));
    }
    let mut out = Vec::new();
    for g in latent_groups(frames) {
        let n = g.len() as f64;
        let mut acc = vec![0.0; dim];
        for t in g {
            for (a, v) in acc.iter_mut().zip(&rows[t * dim..(t + 1) * dim]) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|a| a / n));
    }
    Ok(out)
}

fn upsample(latents: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * dim);
    for (g, range) in latent_groups(frames).enumerate() {
        for _ in range {
            out.extend_from_slice(&latents[g * dim..(g + 1) * dim]);
        }
    }
    out
}

/// The three animation quantizers and the statistics they were trained
/// under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationCodecs {
    pub shape: RvqCodec,
    pub expression: RvqCodec,
    pub pose: RvqCodec,
    pub stats: NormalizationStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnimationTokens {
    pub shape: Vec<u32>,
    pub expression: Vec<u32>,
    pub pose: Vec<u32>,
}

impl AnimationCodecs {
    /// Fits statistics, then trains each RVQ on normalized (and, for
    /// expression and pose, latent-pooled) vectors.
    pub fn train(data: &[AnimationParams], config: &TokenizerConfig, iters: usize, seed: u64) -> Result<Self, CodecError> {
        let stats = NormalizationStats::fit(data)?;
        let mut sh = Vec::new();
        let mut ex = Vec::new();
        let mut po = Vec::new();
        for a in data {
            let n = normalize_animation(a, &stats)?;
            sh.extend_from_slice(&n.shape);
            ex.extend(pool_latents(&n.expression, n.frames, n.expression_dim())?);
            po.extend(pool_latents(&n.pose, n.frames, n.pose_dim())?);
        }
        let codes = |c: super::RvqConfig| vec![c.codes as usize; c.levels as usize];
        Ok(Self {
            shape: train_rvq(&sh, stats.shape.dim(), &codes(config.shape), iters, rng::derive(seed, 1))?,
            expression: train_rvq(
                &ex,
                stats.expression.dim(),
                &codes(config.expression),
                iters,
                rng::derive(seed, 2),
            )?,
            pose: train_rvq(&po, stats.pose.dim(), &codes(config.pose), iters, rng::derive(seed, 3))?,
            stats,
        })
    }
}

fn encode_rows(codec: &RvqCodec, rows: &[f64]) -> Result<Vec<u32>, CodecError> {
    let mut out = Vec::new();
    for r in rows.chunks_exact(codec.dim()) {
        out.extend(codec.encode(r)?);
    }
    Ok(out)
}

fn decode_rows(codec: &RvqCodec, tokens: &[u32], rows: usize) -> Result<Vec<f64>, CodecError> {
    let l = codec.num_levels();
    if tokens.len() != rows * l {
        return Err(CodecError::TokenCountMismatch {
            expected: rows * l,
            got: tokens.len(),
        });
    }
    let mut out = Vec::with_capacity(rows * codec.dim());
    for ids in tokens.chunks_exact(l) {
        out.extend(codec.decode(ids)?);
    }
    Ok(out)
}

/// Shape is one RVQ group; expression and pose are one group per latent
/// frame, flattened frame-major with levels low to high.
pub fn encode_animation(params: &AnimationParams, codecs: &AnimationCodecs) -> Result<AnimationTokens, CodecError> {
    latent_frames(params.frames as u32)?;
    let n = normalize_animation(params, &codecs.stats)?;
    Ok(AnimationTokens {
        shape: codecs.shape.encode(&n.shape)?,
        expression: encode_rows(
            &codecs.expression,
            &pool_latents(&n.expression, n.frames, n.expression_dim())?,
        )?,
        pose: encode_rows(&codecs.pose, &pool_latents(&n.pose, n.frames, n.pose_dim())?)?,
    })
}

/// RVQ decode per latent, nearest upsampling back to `frames`, then
/// denormalization.
pub fn decode_animation(
    tokens: &AnimationTokens,
    codecs: &AnimationCodecs,
    frames: usize,
    frame_rate: u32,
) -> Result<AnimationParams, CodecError> {
    let lat = latent_frames(frames as u32)? as usize;
    let shape = decode_rows(&codecs.shape, &tokens.shape, 1)?;
    let ex = decode_rows(&codecs.expression, &tokens.expression, lat)?;
    let po = decode_rows(&codecs.pose, &tokens.pose, lat)?;
    let norm = AnimationParams {
        shape,
        expression: upsample(&ex, frames, codecs.expression.dim()),
        pose: upsample(&po, frames, codecs.pose.dim()),
        frames,
        frame_rate,
    };
    denormalize_animation(&norm, &codecs.stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::RvqConfig;
    use crate::quantize::Codebook;
    use rand::Rng as _;

    fn trajectory(seed: u64, frames: usize) -> AnimationParams {
        let mut r = rng::seeded(seed);
        let shape = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let (a, w) = (r.random_range(0.5..2.0), r.random_range(0.05..0.4));
        let expression = (0..frames)
            .flat_map(|t| (0..3).map(move |d| a * libm::sin(w * t as f64 + d as f64)))
            .collect();
        let pose = (0..frames).flat_map(|t| [0.01 * t as f64, -0.02 * t as f64]).collect();
        AnimationParams::new(shape, expression, pose, frames, 25).unwrap()
    }

    #[test]
    fn normalization_is_invertible_and_centres() {
        let data: Vec<_> = (0..20).map(|s| trajectory(s, 9)).collect();
        let stats = NormalizationStats::fit(&data).unwrap();
        let mean_params = AnimationParams::new(
            stats.shape.mean.clone(),
            stats.expression.mean.clone(),
            stats.pose.mean.clone(),
            1,
            25,
        )
        .unwrap();
        let z = normalize_animation(&mean_params, &stats).unwrap();
        assert!(z.shape.iter().chain(&z.expression).chain(&z.pose).all(|v| *v == 0.0));
        let mut sums = [0.0f64; 3];
        let mut count = 0.0;
        for d in &data {
            let n = normalize_animation(d, &stats).unwrap();
            let back = denormalize_animation(&n, &stats).unwrap();
            for (a, b) in back.expression.iter().zip(&d.expression) {
                assert!((a - b).abs() < 1e-12);
            }
            for t in 0..n.frames {
                for (k, s) in sums.iter_mut().enumerate() {
                    *s += n.expression[t * 3 + k];
                }
                count += 1.0;
            }
        }
        for s in sums {
            assert!((s / count).abs() < 1e-9);
        }
        let bad = AnimationParams::new(vec![0.0; 5], vec![0.0; 3], vec![0.0; 2], 1, 25).unwrap();
        assert!(matches!(
            normalize_animation(&bad, &stats),
            Err(CodecError::Quant(QuantError::DimMismatch { .. }))
        ));
    }

    #[test]
    fn pooling_groups() {
        let rows: Vec<f64> = (0..9).map(|t| t as f64).collect();
        assert_eq!(pool_latents(&rows, 9, 1).unwrap(), [0.0, 2.5, 6.5]);
        assert_eq!(pool_latents(&rows[..4], 4, 1), Err(CodecError::BadTemporalLength(4)));
    }

    fn single_level(dim: usize, entries: Vec<f64>) -> RvqCodec {
        RvqCodec::new(vec![Codebook::from_entries(dim, entries).unwrap()]).unwrap()
    }

    fn identity_stats(a: &AnimationParams) -> NormalizationStats {
        NormalizationStats {
            shape: DimStats::identity(a.shape.len()),
            expression: DimStats::identity(a.expression_dim()),
            pose: DimStats::identity(a.pose_dim()),
        }
    }

    #[test]
    fn constant_codeword_repeats_and_decodes_flat() {
        let cw = [0.5, -1.0, 2.0];
        let a = AnimationParams::new(vec![1.0; 4], cw.repeat(13), vec![0.0; 26], 13, 25).unwrap();
        let codecs = AnimationCodecs {
            shape: single_level(4, vec![1.0; 4]),
            expression: single_level(3, [[9.0, 9.0, 9.0], cw].concat()),
            pose: single_level(2, vec![0.0; 2]),
            stats: identity_stats(&a),
        };
        let t = encode_animation(&a, &codecs).unwrap();
        assert_eq!(t.expression, [1, 1, 1, 1]);
        assert_eq!(decode_animation(&t, &codecs, 13, 25).unwrap(), a);
        // one latent frame decodes to a constant trajectory
        let one = AnimationTokens {
            shape: vec![0],
            expression: vec![0],
            pose: vec![0],
        };
        let d = decode_animation(&one, &codecs, 1, 25).unwrap();
        assert_eq!(d.expression, [9.0, 9.0, 9.0]);
        assert!(matches!(
            decode_animation(&one, &codecs, 5, 25),
            Err(CodecError::TokenCountMismatch { .. })
        ));
    }

    #[test]
    fn all_zero_tokens_decode_to_level_zero_sum() {
        let data: Vec<_> = (0..40).map(|s| trajectory(s, 13)).collect();
        let cfg = TokenizerConfig {
            shape: RvqConfig { levels: 2, codes: 8 },
            expression: RvqConfig { levels: 3, codes: 16 },
            pose: RvqConfig { levels: 2, codes: 8 },
            ..TokenizerConfig::default()
        };
        let codecs = AnimationCodecs::train(&data, &cfg, 10, 7).unwrap();
        let zeros = AnimationTokens {
            shape: vec![0; 2],
            expression: vec![0; 3 * 4],
            pose: vec![0; 2 * 4],
        };
        let d = decode_animation(&zeros, &codecs, 13, 25).unwrap();
        let e0: Vec<f64> = (0..3)
            .map(|i| codecs.expression.levels().iter().map(|l| l.entry(0)[i]).sum::<f64>())
            .collect();
        for t in 0..13 {
            for i in 0..3 {
                let want = e0[i] * codecs.stats.expression.std[i] + codecs.stats.expression.mean[i];
                assert!((d.expression[t * 3 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_level_beats_single_level_and_reencodes() {
        let data: Vec<_> = (0..100).map(|s| trajectory(s, 29)).collect();
        let cfg = TokenizerConfig {
            shape: RvqConfig { levels: 4, codes: 16 },
            expression: RvqConfig { levels: 4, codes: 32 },
            pose: RvqConfig { levels: 4, codes: 16 },
            ..TokenizerConfig::default()
        };
        let codecs = AnimationCodecs::train(&data, &cfg, 15, 11).unwrap();
        let one = AnimationCodecs {
            shape: codecs.shape.truncated(1),
            expression: codecs.expression.truncated(1),
            pose: codecs.pose.truncated(1),
            stats: codecs.stats.clone(),
        };
        let mse = |c: &AnimationCodecs, a: &AnimationParams| {
            let t = encode_animation(a, c).unwrap();
            let d = decode_animation(&t, c, a.frames, 25).unwrap();
            // compared in normalized units, where the residual bound lives
            let sd = &c.stats.expression.std;
            d.expression
                .iter()
                .zip(&a.expression)
                .enumerate()
                .map(|(i, (x, y))| ((x - y) / sd[i % 3]).powi(2))
                .sum::<f64>()
                / a.expression.len() as f64
        };
        let (mut stable, mut rows) = (0, 0);
        for a in &data {
            assert!(mse(&codecs, a) <= mse(&one, a) + 1e-12);
            let t = encode_animation(a, &codecs).unwrap();
            assert_eq!(t.expression.len(), 8 * 4);
            let d = decode_animation(&t, &codecs, a.frames, 25).unwrap();
            let again = encode_animation(&d, &codecs).unwrap();
            for (x, y) in again.expression.chunks(4).zip(t.expression.chunks(4)) {
                stable += usize::from(x == y);
                rows += 1;
            }
            let d1 = decode_animation(&encode_animation(a, &one).unwrap(), &one, a.frames, 25).unwrap();
            assert_eq!(encode_animation(&d1, &one).unwrap(), encode_animation(a, &one).unwrap());
        }
        assert!(stable * 10 >= rows * 9, "{stable}/{rows} latent rows re-encoded identically");
    }
}
