use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{CodecError, NUM_LABELS};

/// 3DMM-style animation: a time-invariant shape vector plus per-frame
/// expression and pose, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
    pub frames: usize,
    pub frame_rate: u32,
}

impl AnimationParams {
    pub fn new(
        shape: Vec<f64>,
        expression: Vec<f64>,
        pose: Vec<f64>,
        frames: usize,
        frame_rate: u32,
    ) -> Result<Self, CodecError> {
        if frames == 0 || !expression.len().is_multiple_of(frames) || !pose.len().is_multiple_of(frames) {
            return Err(CodecError::ShapeMismatch(format!(
                "{} expression / {} pose values for {frames} frames",
                expression.len(),
                pose.len()
            )));
        }
        if shape.iter().chain(&expression).chain(&pose).any(|v| !v.is_finite()) {
            return Err(CodecError::ShapeMismatch("non-finite animation value".into()));
        }
        Ok(Self {
            shape,
            expression,
            pose,
            frames,
            frame_rate,
        })
    }

    pub fn expression_dim(&self) -> usize {
        self.expression.len() / self.frames
    }

    pub fn pose_dim(&self) -> usize {
        self.pose.len() / self.frames
    }
}

/// Per-pixel semantic labels in `[0, 21)`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticVideo {
    pub fn new(frames: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self, CodecError> {
        if labels.len() != frames * height * width {
            return Err(CodecError::ShapeMismatch(format!(
                "{} labels for {frames}x{height}x{width}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_LABELS) {
            return Err(CodecError::LabelOutOfRange(bad));
        }
        Ok(Self {
            frames,
            height,
            width,
            labels,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, label: u8) -> Result<Self, CodecError> {
        Self::new(frames, height, width, alloc::vec![label; frames * height * width])
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> u8 {
        self.labels[(t * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> Result<Self, CodecError> {
        if pixels.len() != height * width {
            return Err(CodecError::ShapeMismatch(format!(
                "{} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                pixels.push(self.at(sy, x * self.width / width));
            }
        }
        Self { height, width, pixels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbVideo {
    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        let n = self.height * self.width;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn frame_image(&self, t: usize) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            pixels: self.frame(t).to_vec(),
        }
    }
}

/// Mono signal cut into `sample_rate / frame_rate`-sample frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub frame_rate: u32,
}

impl SpeechSignal {
    pub fn window(&self) -> usize {
        (self.sample_rate / self.frame_rate.max(1)) as usize
    }

    /// Frames after zero-padding to a whole window.
    pub fn frames(&self) -> usize {
        self.samples.len().div_ceil(self.window().max(1))
    }

    pub fn padded(&self) -> Vec<f64> {
        let mut s = self.samples.clone();
        s.resize(self.frames() * self.window(), 0.0);
        s
    }
}
