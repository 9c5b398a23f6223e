//! Invertible colour embedding of semantic labels and the palette-based
//! segmentation losses.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{CodecError, RgbVideo, SemanticVideo};

pub const NUM_LABELS: usize = 21;
/// Softmax sharpening of palette logits.
pub const DEFAULT_TAU: f64 = 10.0;
const MIN_SEPARATION: f64 = 0.2;
const LATTICE: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    colors: Vec<[f64; 3]>,
}

impl Default for Palette {
    /// Greedy max-min selection on an 11³ lattice of the unit cube, starting
    /// from black for label 0 (background). Ties go to the lowest lattice
    /// index, so the palette is fully determined.
    fn default() -> Self {
        let step = 1.0 / (LATTICE - 1) as f64;
        let lattice: Vec<[f64; 3]> = (0..LATTICE * LATTICE * LATTICE)
            .map(|i| {
                [
                    (i / (LATTICE * LATTICE)) as f64 * step,
                    (i / LATTICE % LATTICE) as f64 * step,
                    (i % LATTICE) as f64 * step,
                ]
            })
            .collect();
        let mut colors = vec![lattice[0]];
        let mut min_d: Vec<f64> = lattice.iter().map(|c| dist2(c, &lattice[0])).collect();
        while colors.len() < NUM_LABELS {
            let mut best = 0;
            for (i, &d) in min_d.iter().enumerate() {
                if d > min_d[best] {
                    best = i;
                }
            }
            let c = lattice[best];
            colors.push(c);
            for (d, l) in min_d.iter_mut().zip(&lattice) {
                *d = d.min(dist2(l, &c));
            }
        }
        Self { colors }
    }
}

impl Palette {
    /// 21 colours in `[0,1]³`, pairwise further apart than 0.2.
    pub fn from_colors(colors: Vec<[f64; 3]>) -> Result<Self, CodecError> {
        if colors.len() != NUM_LABELS {
            return Err(CodecError::ShapeMismatch(alloc::format!("{} palette colours", colors.len())));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::ShapeMismatch("palette colour outside [0,1]".into()));
        }
        for i in 0..NUM_LABELS {
            for j in i + 1..NUM_LABELS {
                if libm::sqrt(dist2(&colors[i], &colors[j])) <= MIN_SEPARATION {
                    return Err(CodecError::ShapeMismatch(alloc::format!(
                        "palette colours {i} and {j} closer than {MIN_SEPARATION}"
                    )));
                }
            }
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn color(&self, label: u8) -> Result<[f64; 3], CodecError> {
        self.colors
            .get(label as usize)
            .copied()
            .ok_or(CodecError::LabelOutOfRange(label))
    }

    /// Nearest palette label; ties go to the lower label.
    pub fn nearest(&self, rgb: &[f64; 3]) -> u8 {
        let mut best = (0u8, f64::INFINITY);
        for (i, c) in self.colors.iter().enumerate() {
            let d = dist2(rgb, c);
            if d < best.1 {
                best = (i as u8, d);
            }
        }
        best.0
    }

    pub fn min_separation(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.colors.len() {
            for j in i + 1..self.colors.len() {
                m = m.min(libm::sqrt(dist2(&self.colors[i], &self.colors[j])));
            }
        }
        m
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

pub fn embed_labels(labels: &[u8], palette: &Palette) -> Result<Vec<[f64; 3]>, CodecError> {
    labels.iter().map(|&l| palette.color(l)).collect()
}

pub fn unembed_pixels(pixels: &[[f64; 3]], palette: &Palette) -> Vec<u8> {
    pixels.iter().map(|p| palette.nearest(p)).collect()
}

pub fn color_embed(video: &SemanticVideo, palette: &Palette) -> Result<RgbVideo, CodecError> {
    Ok(RgbVideo {
        frames: video.frames,
        height: video.height,
        width: video.width,
        pixels: embed_labels(&video.labels, palette)?,
    })
}

pub fn color_unembed(rgb: &RgbVideo, palette: &Palette) -> Result<SemanticVideo, CodecError> {
    if rgb.pixels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CodecError::ShapeMismatch("non-finite pixel".into()));
    }
    SemanticVideo::new(rgb.frames, rgb.height, rgb.width, unembed_pixels(&rgb.pixels, palette))
}

/// `logit_c = −τ ‖rgb − palette_c‖²`.
pub fn palette_logits(rgb: &[f64; 3], palette: &Palette, tau: f64) -> Vec<f64> {
    palette.colors.iter().map(|c| -tau * dist2(rgb, c)).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Mean pixel-wise cross-entropy of palette logits against true labels.
pub fn seg_cross_entropy(pixels: &[[f64; 3]], labels: &[u8], palette: &Palette, tau: f64) -> Result<f64, CodecError> {
    if pixels.len() != labels.len() {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "{} pixels vs {} labels",
            pixels.len(),
            labels.len()
        )));
    }
    if pixels.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    let mut total = 0.0;
    for (p, &l) in pixels.iter().zip(labels) {
        if l as usize >= NUM_LABELS {
            return Err(CodecError::LabelOutOfRange(l));
        }
        let logits = palette_logits(p, palette, tau);
        total += log_sum_exp(&logits) - logits[l as usize];
    }
    Ok(total / pixels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub commit: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 3.0,
            commit: 1.0,
            tau: DEFAULT_TAU,
        }
    }
}

/// Reconstruction MSE against the colour-embedded labels, plus weighted
/// commitment and segmentation terms. No adversarial term.
pub fn composite_codec_loss(
    recon: &[[f64; 3]],
    target_labels: &[u8],
    palette: &Palette,
    weights: LossWeights,
    commit_term: f64,
) -> Result<f64, CodecError> {
    if weights.seg < 0.0 || weights.commit < 0.0 || !(weights.tau > 0.0) {
        return Err(CodecError::InvalidWeight);
    }
    let target = embed_labels(target_labels, palette)?;
    let ce = seg_cross_entropy(recon, target_labels, palette, weights.tau)?;
    let mse = recon
        .iter()
        .zip(&target)
        .map(|(a, b)| dist2(a, b))
        .sum::<f64>()
        / (3 * recon.len()) as f64;
    Ok(mse + weights.commit * commit_term + weights.seg * ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn default_palette_is_valid_and_deterministic() {
        let p = Palette::default();
        assert_eq!(p.colors().len(), NUM_LABELS);
        assert!(p.min_separation() > 0.2);
        assert_eq!(p, Palette::default());
        assert_eq!(p.color(0).unwrap(), [0.0, 0.0, 0.0]);
        Palette::from_colors(p.colors().to_vec()).unwrap();
    }

    #[test]
    fn embed_unembed_all_labels() {
        let p = Palette::default();
        let labels: Vec<u8> = (0..NUM_LABELS as u8).collect();
        let rgb = embed_labels(&labels, &p).unwrap();
        assert_eq!(unembed_pixels(&rgb, &p), labels);
        assert_eq!(embed_labels(&[21], &p), Err(CodecError::LabelOutOfRange(21)));
    }

    #[test]
    fn midpoint_goes_to_lower_label() {
        let p = Palette::default();
        let mut best = (0usize, 1usize, f64::INFINITY);
        for i in 0..NUM_LABELS {
            for j in i + 1..NUM_LABELS {
                let d = dist2(&p.colors()[i], &p.colors()[j]);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (a, b) = (p.colors()[best.0], p.colors()[best.1]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        // exact midpoint on the lattice is representable, so the tie is exact
        assert_eq!(dist2(&mid, &a), dist2(&mid, &b));
        assert_eq!(p.nearest(&mid) as usize, best.0);
    }

    #[test]
    fn random_noise_matches_brute_force() {
        let p = Palette::default();
        let mut r = rng::seeded(3);
        for _ in 0..5000 {
            let px = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
            let oracle = (0..NUM_LABELS)
                .min_by(|&i, &j| {
                    dist2(&px, &p.colors()[i])
                        .partial_cmp(&dist2(&px, &p.colors()[j]))
                        .unwrap()
                        .then(i.cmp(&j))
                })
                .unwrap();
            assert_eq!(p.nearest(&px) as usize, oracle);
        }
    }

    #[test]
    fn logits_properties() {
        let p = Palette::default();
        let c7 = p.colors()[7];
        let l = palette_logits(&c7, &p, 10.0);
        assert_eq!(l[7], 0.0);
        assert!(l.iter().enumerate().all(|(i, &v)| i == 7 || v < 0.0));
        let l2 = palette_logits(&c7, &p, 20.0);
        for (a, b) in l.iter().zip(&l2) {
            assert_eq!(2.0 * a, *b);
        }
        // softmax against a Gibbs distribution computed from distances
        let px = [0.3, 0.6, 0.1];
        let logits = palette_logits(&px, &p, 10.0);
        let lse = log_sum_exp(&logits);
        let gibbs: Vec<f64> = p.colors().iter().map(|c| libm::exp(-10.0 * dist2(&px, c))).collect();
        let z: f64 = gibbs.iter().sum();
        for (lg, g) in logits.iter().zip(&gibbs) {
            assert!((libm::exp(lg - lse) - g / z).abs() < 1e-12);
        }
    }

    /// 21 points on a sphere around the cube centre: every palette colour is
    /// equidistant from the centre.
    pub(crate) fn equidistant_palette() -> Palette {
        let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
        let colors = (0..NUM_LABELS)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / NUM_LABELS as f64;
                let r = libm::sqrt(1.0 - y * y);
                let th = golden * i as f64;
                let s = 0.45;
                [0.5 + s * r * libm::cos(th), 0.5 + s * y, 0.5 + s * r * libm::sin(th)]
            })
            .collect();
        Palette::from_colors(colors).unwrap()
    }

    #[test]
    fn equidistant_palette_gives_log21() {
        let p = equidistant_palette();
        let ce = seg_cross_entropy(&[[0.5, 0.5, 0.5]; 4], &[0, 5, 11, 20], &p, 10.0).unwrap();
        assert!((ce - libm::log(21.0)).abs() < 1e-9);
    }

    #[test]
    fn exact_embedding_matches_closed_form() {
        let p = Palette::default();
        let labels = [0u8, 3, 9, 20, 9];
        let rgb = embed_labels(&labels, &p).unwrap();
        let ce = seg_cross_entropy(&rgb, &labels, &p, 10.0).unwrap();
        let oracle: f64 = labels
            .iter()
            .map(|&l| {
                let s: f64 = p
                    .colors()
                    .iter()
                    .map(|c| libm::exp(-10.0 * dist2(c, &p.colors()[l as usize])))
                    .sum();
                libm::log(s)
            })
            .sum::<f64>()
            / labels.len() as f64;
        assert!((ce - oracle).abs() < 1e-12);
        assert!(ce > 0.0);
        let w = LossWeights {
            seg: 3.0,
            commit: 0.5,
            tau: 10.0,
        };
        let total = composite_codec_loss(&rgb, &labels, &p, w, 0.0).unwrap();
        assert!((total - 3.0 * oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_along_line_to_truth() {
        let p = Palette::default();
        let (wrong, right) = (p.colors()[4], p.colors()[12]);
        let mut prev = f64::INFINITY;
        for s in 0..=20 {
            let t = s as f64 / 20.0;
            let px = [
                wrong[0] + t * (right[0] - wrong[0]),
                wrong[1] + t * (right[1] - wrong[1]),
                wrong[2] + t * (right[2] - wrong[2]),
            ];
            let ce = seg_cross_entropy(&[px], &[12], &p, 10.0).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
    }

    #[test]
    fn composite_reductions_and_errors() {
        let p = Palette::default();
        let labels = [1u8, 2, 3];
        let recon = [[0.2, 0.4, 0.9], [0.0, 0.1, 0.0], [1.0, 1.0, 0.5]];
        let w0 = LossWeights {
            seg: 0.0,
            commit: 0.0,
            tau: 10.0,
        };
        let target = embed_labels(&labels, &p).unwrap();
        let mse: f64 = recon
            .iter()
            .zip(&target)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
            .sum::<f64>()
            / 9.0;
        assert!((composite_codec_loss(&recon, &labels, &p, w0, 0.0).unwrap() - mse).abs() < 1e-15);
        let mut last = 0.0;
        for k in 0..5 {
            let w = LossWeights {
                seg: k as f64,
                commit: k as f64,
                tau: 10.0,
            };
            let v = composite_codec_loss(&recon, &labels, &p, w, 0.3).unwrap();
            assert!(v >= last);
            last = v;
        }
        let bad = LossWeights {
            seg: -1.0,
            commit: 0.0,
            tau: 10.0,
        };
        assert_eq!(
            composite_codec_loss(&recon, &labels, &p, bad, 0.0),
            Err(CodecError::InvalidWeight)
        );
        assert!(matches!(
            seg_cross_entropy(&recon, &labels[..2], &p, 10.0),
            Err(CodecError::ShapeMismatch(_))
        ));
    }
}
