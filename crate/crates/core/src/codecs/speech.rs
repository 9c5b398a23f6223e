//! Speech tokenizer: RVQ over raw fixed-size sample windows.

use alloc::vec::Vec;

use super::{CodecError, SpeechSignal};
use crate::quantize::RvqCodec;

/// Zero-padded `frames × window` rows of raw samples.
pub fn speech_frame_features(signal: &SpeechSignal) -> Result<Vec<f64>, CodecError> {
    if signal.samples.is_empty() || signal.window() == 0 {
        return Err(CodecError::EmptyInput);
    }
    Ok(signal.padded())
}

/// Frame-major, levels low to high within a frame.
pub fn encode_speech(signal: &SpeechSignal, codec: &RvqCodec) -> Result<Vec<u32>, CodecError> {
    let rows = speech_frame_features(signal)?;
    let mut out = Vec::with_capacity(signal.frames() * codec.num_levels());
    for r in rows.chunks_exact(signal.window()) {
        out.extend(codec.encode(r)?);
    }
    Ok(out)
}

pub fn decode_speech(tokens: &[u32], codec: &RvqCodec, sample_rate: u32, frame_rate: u32) -> Result<SpeechSignal, CodecError> {
    let l = codec.num_levels();
    if tokens.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    if !tokens.len().is_multiple_of(l) {
        return Err(CodecError::TokenCountMismatch {
            expected: tokens.len().div_ceil(l) * l,
            got: tokens.len(),
        });
    }
    let mut samples = Vec::with_capacity(tokens.len() / l * codec.dim());
    for ids in tokens.chunks_exact(l) {
        samples.extend(codec.decode(ids)?);
    }
    Ok(SpeechSignal {
        samples,
        sample_rate,
        frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::{Dims, TokenizerConfig};
    use crate::quantize::train_rvq;
    use crate::vocab::ModalityKind;
    use alloc::vec;

    fn tone(freq: f64, amp: f64, phase: f64, frames: usize) -> SpeechSignal {
        let samples = (0..frames * 64)
            .map(|n| amp * libm::sin(2.0 * core::f64::consts::PI * freq * n as f64 / 1600.0 + phase))
            .collect();
        SpeechSignal {
            samples,
            sample_rate: 1600,
            frame_rate: 25,
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / libm::sqrt(saa * sbb)
    }

    #[test]
    fn token_count_for_five_seconds() {
        let cfg = TokenizerConfig::default();
        let s = tone(100.0, 1.0, 0.0, 125);
        assert_eq!(s.frames(), 125);
        let n = cfg.token_count(ModalityKind::Speech, Dims::Frames { frames: 125 }).unwrap();
        assert_eq!(n, 500);
        assert_ne!(n, crate::codecs::REFERENCE_SPEECH_TOKENS_5S);
    }

    #[test]
    fn sine_family_roundtrip_correlates() {
        let mut train = Vec::new();
        for f in [50.0, 75.0, 100.0, 125.0] {
            for k in 0..8 {
                train.extend(tone(f, 0.5 + 0.1 * k as f64, 0.3 * k as f64, 4).samples);
            }
        }
        let codec = train_rvq(&train, 64, &[32, 32, 32, 32], 20, 5).unwrap();
        let s = tone(75.0, 0.8, 0.6, 10);
        let toks = encode_speech(&s, &codec).unwrap();
        assert_eq!(toks.len(), 40);
        let back = decode_speech(&toks, &codec, 1600, 25).unwrap();
        assert_eq!(back.samples.len(), s.samples.len());
        assert!(correlation(&s.samples, &back.samples) > 0.9);
    }

    #[test]
    fn padding_and_errors() {
        let s = SpeechSignal {
            samples: vec![1.0; 65],
            sample_rate: 1600,
            frame_rate: 25,
        };
        assert_eq!(s.frames(), 2);
        assert_eq!(speech_frame_features(&s).unwrap().len(), 128);
        let empty = SpeechSignal {
            samples: vec![],
            ..s
        };
        let codec = train_rvq(&[0.0; 64], 64, &[1], 1, 0).unwrap();
        assert_eq!(encode_speech(&empty, &codec), Err(CodecError::EmptyInput));
    }
}
