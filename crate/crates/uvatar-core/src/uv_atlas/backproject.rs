//! Back-projection of per-view label images into UV space with visibility
//! and incidence-angle weighting. Used when stitching multi-view
//! segmentations into one complete map.

use super::maps::{LabelImage, LabelPalette, SegmentationMap};
use super::texel_table::TexelTable;
use super::AtlasError;
use crate::mesh::TriangleBvh;
use crate::registration::Camera;

/// One view's contribution to the stitching problem.
#[derive(Debug, Clone)]
pub struct Backprojection {
    pub segmentation: SegmentationMap,
    /// Per-texel weight: cosine of the incidence angle, clamped at zero;
    /// zero for occluded, back-facing, or out-of-frame texels.
    pub weights: Vec<f64>,
}

const OCCLUSION_EPS: f64 = 1e-6;

/// Sample a label image at every visible texel of the posed mesh.
///
/// For each valid texel the 3D surface point is tested for occlusion by ray
/// casting toward the camera; visible texels take the label under their
/// projection, weighted by the cosine between the surface normal and view
/// direction.
pub fn backproject_view_to_uv(
    bvh: &TriangleBvh,
    camera: &Camera,
    label_image: &LabelImage,
    table: &TexelTable,
    palette: &LabelPalette,
) -> Result<Backprojection, AtlasError> {
    let mesh = bvh.mesh();
    let mut seg = SegmentationMap::new(table.resolution(), palette.clone());
    let mut weights = vec![0.0f64; table.resolution() * table.resolution()];
    let eye = camera.center();

    for &t in table.valid_indices() {
        let sample = table.sample(t).unwrap();
        let Some(point) = table.texel_position(t, &mesh.vertices, &mesh.faces) else {
            continue;
        };
        let to_eye = eye - point;
        let dist = to_eye.norm();
        if dist < OCCLUSION_EPS {
            continue;
        }
        let dir = to_eye / dist;
        let normal = mesh.face_normal(sample.face);
        let cos = normal.dot(&dir);
        if cos <= 0.0 {
            continue; // back-facing
        }
        // Start the occlusion ray a hair off the surface to skip the texel's
        // own face.
        let origin = point + dir * OCCLUSION_EPS;
        if bvh.segment_occluded(&origin, &dir, OCCLUSION_EPS, dist - 2.0 * OCCLUSION_EPS) {
            continue;
        }
        let Some((u, v)) = camera.project(&point) else {
            continue;
        };
        let x = u.floor();
        let y = v.floor();
        if x < 0.0 || y < 0.0 || x >= label_image.width as f64 || y >= label_image.height as f64 {
            continue;
        }
        let label = label_image.get(x as usize, y as usize);
        if label as usize >= palette.len() {
            return Err(AtlasError::LabelOutOfPalette {
                texel: t,
                label,
                palette: palette.len(),
            });
        }
        seg.labels[t] = label;
        seg.valid[t] = true;
        weights[t] = cos;
    }

    Ok(Backprojection { segmentation: seg, weights })
}
