//! Image tokenizer: a 16×16 grid of patches, each mapped to one LFQ code.

use alloc::vec::Vec;

use super::{CodecError, RgbImage, IMAGE_GRID};
use crate::quantize::LfqCodec;

/// Flattened RGB length of one patch.
pub fn image_patch_dim(height: usize, width: usize) -> Result<usize, CodecError> {
    let g = IMAGE_GRID as usize;
    if height == 0 || width == 0 || !height.is_multiple_of(g) || !width.is_multiple_of(g) {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "{height}x{width} image is not divisible into a {g}x{g} grid"
        )));
    }
    Ok(height / g * (width / g) * 3)
}

fn patch(img: &RgbImage, py: usize, px: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(ph * pw * 3);
    for y in py * ph..(py + 1) * ph {
        for x in px * pw..(px + 1) * pw {
            v.extend(img.at(y, x).iter().map(|c| c - 0.5));
        }
    }
    v
}

/// Row-major patch codes of the centred image.
pub fn encode_image(img: &RgbImage, codec: &LfqCodec) -> Result<Vec<u32>, CodecError> {
    let dim = image_patch_dim(img.height, img.width)?;
    if codec.dim() != dim {
        return Err(crate::quantize::QuantError::DimMismatch {
            expected: dim,
            got: codec.dim(),
        }
        .into());
    }
    let g = IMAGE_GRID as usize;
    let (ph, pw) = (img.height / g, img.width / g);
    let mut out = Vec::with_capacity(g * g);
    for py in 0..g {
        for px in 0..g {
            out.push(codec.encode(&patch(img, py, px, ph, pw))?);
        }
    }
    Ok(out)
}

/// Each patch becomes `0.5 + 0.25 · P·s` clamped to `[0, 1]`, with `s` the
/// decoded sign vector.
pub fn decode_image(tokens: &[u32], codec: &LfqCodec, height: usize, width: usize) -> Result<RgbImage, CodecError> {
    image_patch_dim(height, width)?;
    let g = IMAGE_GRID as usize;
    if tokens.len() != g * g {
        return Err(CodecError::TokenCountMismatch {
            expected: g * g,
            got: tokens.len(),
        });
    }
    let (ph, pw) = (height / g, width / g);
    let mut pixels = alloc::vec![[0.0; 3]; height * width];
    for (i, &id) in tokens.iter().enumerate() {
        let v = codec.preimage(&codec.decode(id)?);
        let (py, px) = (i / g, i % g);
        for (j, rgb) in v.chunks_exact(3).enumerate() {
            let (y, x) = (py * ph + j / pw, px * pw + j % pw);
            pixels[y * width + x] = [0, 1, 2].map(|c| (0.5 + 0.25 * rgb[c]).clamp(0.0, 1.0));
        }
    }
    RgbImage::new(height, width, pixels)
}
