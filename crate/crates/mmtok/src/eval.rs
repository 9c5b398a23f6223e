//! Desk metrics comparing a prediction directory with a reference record
//! directory (same file names, see `dataset`). Files missing from the
//! prediction are skipped, and the count of compared files is reported.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Result};
use mmtok_core::codecs::SemanticVideo;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, AnimationFile};
use crate::formats::{labels_from_bytes, signal_from_bytes};

/// A mean over compared items; `None` when nothing was compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn mean(&self) -> Mean {
        Mean {
            value: (self.n > 0).then(|| self.sum / self.n as f64),
            count: self.n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixel accuracy of semantic labels.
    pub label_accuracy: Mean,
    /// Mean squared error over every animation value present in both files.
    pub animation_mse: Mean,
    pub script_exact_match: Mean,
    /// Fraction of description words matching position by position.
    pub description_attribute_accuracy: Mean,
    /// Pearson correlation of DFT magnitude spectra.
    pub speech_spectral_correlation: Mean,
}

pub fn label_accuracy(pred: &SemanticVideo, truth: &SemanticVideo) -> Result<f64> {
    ensure!(
        (pred.frames, pred.height, pred.width) == (truth.frames, truth.height, truth.width),
        "label grids differ in shape"
    );
    let hits = pred.labels.iter().zip(&truth.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.labels.len().max(1) as f64)
}

/// Squared error summed over fields present in both, and the value count.
pub fn animation_sq_error(pred: &AnimationFile, truth: &AnimationFile) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, t) in [
        (&pred.shape, &truth.shape),
        (&pred.expression, &truth.expression),
        (&pred.pose, &truth.pose),
    ] {
        if let (Some(p), Some(t)) = (p, t) {
            ensure!(p.len() == t.len(), "animation lengths differ: {} vs {}", p.len(), t.len());
            sum += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += t.len();
        }
    }
    Ok((sum, n))
}

pub fn attribute_accuracy(pred: &str, truth: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let t: Vec<&str> = truth.split_whitespace().collect();
    if t.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    t.iter().enumerate().filter(|(i, w)| p.get(*i) == Some(*w)).count() as f64 / t.len() as f64
}

/// `|X_k|` for `k = 0..=n/2` by direct summation.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * t % n.max(1)) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return if va == vb && a == b { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

/// Correlation of the magnitude spectra over the common length.
pub fn spectral_correlation(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().min(truth.len());
    pearson(&magnitude_spectrum(&pred[..n]), &magnitude_spectrum(&truth[..n]))
}

#[derive(Default)]
struct Mse {
    sum: f64,
    values: usize,
    files: usize,
}

const CLIP_PREFIXES: [&str; 2] = ["", "past_"];

/// Compares one prediction directory with one reference directory.
fn eval_pair(pred: &Path, truth: &Path, acc: &mut [Acc; 4], mse: &mut Mse) -> Result<()> {
    for pre in CLIP_PREFIXES {
        let file = |d: &Path, name: &str| d.join(format!("{pre}{name}"));
        let p = file(pred, "semantic.lbl");
        if p.exists() {
            let a = labels_from_bytes(&fs::read(&p)?)?;
            let b = labels_from_bytes(&fs::read(file(truth, "semantic.lbl"))?)?;
            acc[0].push(label_accuracy(&a, &b)?);
        }
        let p = file(pred, "animation.json");
        if p.exists() {
            let (s, n) = animation_sq_error(&read_json(&p)?, &read_json(&file(truth, "animation.json"))?)?;
            mse.sum += s;
            mse.values += n;
            mse.files += 1;
        }
        let p = file(pred, "script.txt");
        if p.exists() {
            let same = fs::read_to_string(&p)? == fs::read_to_string(file(truth, "script.txt"))?;
            acc[1].push(if same { 1.0 } else { 0.0 });
        }
        let p = file(pred, "speech.sig");
        if p.exists() {
            let a = signal_from_bytes(&fs::read(&p)?)?;
            let b = signal_from_bytes(&fs::read(file(truth, "speech.sig"))?)?;
            acc[3].push(spectral_correlation(&a.samples, &b.samples));
        }
    }
    let p = pred.join("description.txt");
    if p.exists() {
        acc[2].push(attribute_accuracy(
            &fs::read_to_string(&p)?,
            &fs::read_to_string(truth.join("description.txt"))?,
        ));
    }
    Ok(())
}

/// Evaluates paired directories. Animation MSE pools every compared value.
pub fn evaluate(pairs: &[(impl AsRef<Path>, impl AsRef<Path>)]) -> Result<EvalReport> {
    let mut acc: [Acc; 4] = Default::default();
    let mut mse = Mse::default();
    for (p, t) in pairs {
        eval_pair(p.as_ref(), t.as_ref(), &mut acc, &mut mse)?;
    }
    Ok(EvalReport {
        label_accuracy: acc[0].mean(),
        animation_mse: Mean {
            value: (mse.values > 0).then(|| mse.sum / mse.values as f64),
            count: mse.files,
        },
        script_exact_match: acc[1].mean(),
        description_attribute_accuracy: acc[2].mean(),
        speech_spectral_correlation: acc[3].mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_of_a_pure_tone() {
        let n = 64;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * std::f64::consts::PI * 5.0 * t as f64 / n as f64).cos()).collect();
        let s = magnitude_spectrum(&x);
        assert_eq!(s.len(), 33);
        assert!((s[5] - 32.0).abs() < 1e-9);
        assert!(s.iter().enumerate().all(|(k, v)| k == 5 || v.abs() < 1e-9));
    }

    #[test]
    fn metric_edge_cases() {
        assert_eq!(attribute_accuracy("red tall deep", "red tall deep"), 1.0);
        assert!((attribute_accuracy("red short deep", "red tall deep") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(attribute_accuracy("", "red"), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        let x = [0.3, -0.1, 0.7, 0.2, -0.5];
        assert!((spectral_correlation(&x, &x) - 1.0).abs() < 1e-12);
    }
}
