use alloc::vec::Vec;

use super::{unembed_pixels, CodecError, Palette, RgbImage, RgbVideo, SemanticVideo};

/// Deterministic stand-in for a semantic-to-RGB video decoder. Pixels whose
/// label agrees with the reference image's label at the same location copy
/// the reference colour; all others get their palette colour.
pub fn render_video(semantic: &SemanticVideo, reference: &RgbImage, palette: &Palette) -> Result<RgbVideo, CodecError> {
    if reference.height != semantic.height || reference.width != semantic.width {
        return Err(CodecError::ShapeMismatch(alloc::format!(
            "reference {}x{} vs video {}x{}",
            reference.height,
            reference.width,
            semantic.height,
            semantic.width
        )));
    }
    let ref_labels = unembed_pixels(&reference.pixels, palette);
    let n = semantic.height * semantic.width;
    let mut pixels = Vec::with_capacity(semantic.labels.len());
    for (i, &l) in semantic.labels.iter().enumerate() {
        let p = i % n;
        pixels.push(if ref_labels[p] == l {
            reference.pixels[p]
        } else {
            palette.color(l)?
        });
    }
    Ok(RgbVideo {
        frames: semantic.frames,
        height: semantic.height,
        width: semantic.width,
        pixels,
    })
}
