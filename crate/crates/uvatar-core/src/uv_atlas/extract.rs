//! Partial map extraction: remap image evidence into UV space through dense
//! pixel-to-surface correspondences.

use super::maps::{ColorImage, IuvImage, LabelImage, LabelPalette, SegmentationMap, TextureMap};
use super::texel_table::uv_to_texel;
use super::{AtlasError, PartMap};

/// Remap a camera image into a partial UV texture map. Every person pixel
/// splats its color onto the texel containing its correspondence; texels
/// receiving several pixels average them.
pub fn extract_partial_texture(
    image: &ColorImage,
    iuv: &IuvImage,
    part_map: &PartMap,
    resolution: usize,
) -> Result<TextureMap, AtlasError> {
    if (image.width, image.height) != (iuv.width, iuv.height) {
        return Err(AtlasError::ImageSizeMismatch {
            a: (image.width, image.height),
            b: (iuv.width, iuv.height),
        });
    }
    let mut sums = vec![[0.0f64; 3]; resolution * resolution];
    let mut counts = vec![0u32; resolution * resolution];
    for i in 0..iuv.part.len() {
        let part = iuv.part[i];
        if part == 0 {
            continue;
        }
        let (u, v) = part_map.to_global(part, iuv.u[i], iuv.v[i])?;
        let t = uv_to_texel(resolution, u, v);
        let c = image.pixels[i];
        for ch in 0..3 {
            sums[t][ch] += c[ch] as f64;
        }
        counts[t] += 1;
    }
    let mut out = TextureMap::new(resolution);
    for t in 0..counts.len() {
        if counts[t] > 0 {
            let n = counts[t] as f64;
            out.pixels[t] = [
                (sums[t][0] / n).round().clamp(0.0, 255.0) as u8,
                (sums[t][1] / n).round().clamp(0.0, 255.0) as u8,
                (sums[t][2] / n).round().clamp(0.0, 255.0) as u8,
            ];
            out.valid[t] = true;
        }
    }
    Ok(out)
}

/// Remap a per-pixel label image into a partial UV segmentation map by
/// majority vote per texel; ties resolve to the lowest label index.
pub fn extract_partial_segmentation(
    seg_image: &LabelImage,
    iuv: &IuvImage,
    part_map: &PartMap,
    resolution: usize,
    palette: &LabelPalette,
) -> Result<SegmentationMap, AtlasError> {
    if (seg_image.width, seg_image.height) != (iuv.width, iuv.height) {
        return Err(AtlasError::ImageSizeMismatch {
            a: (seg_image.width, seg_image.height),
            b: (iuv.width, iuv.height),
        });
    }
    let l = palette.len();
    let mut votes = vec![0u32; resolution * resolution * l];
    for i in 0..iuv.part.len() {
        let part = iuv.part[i];
        if part == 0 {
            continue;
        }
        let label = seg_image.labels[i];
        if label as usize >= l {
            return Err(AtlasError::LabelOutOfPalette { texel: i, label, palette: l });
        }
        let (u, v) = part_map.to_global(part, iuv.u[i], iuv.v[i])?;
        let t = uv_to_texel(resolution, u, v);
        votes[t * l + label as usize] += 1;
    }
    let mut out = SegmentationMap::new(resolution, palette.clone());
    for t in 0..resolution * resolution {
        let slot = &votes[t * l..(t + 1) * l];
        let total: u32 = slot.iter().sum();
        if total == 0 {
            continue;
        }
        let mut best = 0usize;
        for (i, &v) in slot.iter().enumerate() {
            if v > slot[best] {
                best = i;
            }
        }
        out.labels[t] = best as u8;
        out.valid[t] = true;
    }
    Ok(out)
}
