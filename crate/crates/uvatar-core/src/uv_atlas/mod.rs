//! The surface-to-map bridge: UV atlas, texel lookup tables, partial map
//! extraction from images via dense correspondences, displacement-map baking
//! and application, and back-projection of per-view labels into UV space.

mod backproject;
mod displacement;
mod extract;
mod maps;
mod texel_table;

pub use backproject::{backproject_view_to_uv, Backprojection};
pub use displacement::{apply_displacement, bake_displacement, AppliedOffsets};
pub use extract::{extract_partial_segmentation, extract_partial_texture};
pub use maps::{
    ColorImage, DisplacementMap, IuvImage, LabelImage, LabelPalette, SegmentationMap, TextureMap,
    DISPLACEMENT_ZERO_RAW, LABEL_BACKGROUND, LABEL_HAIR, LABEL_LOWER, LABEL_SHOES, LABEL_SKIN,
    LABEL_UPPER,
};
pub use texel_table::{build_texel_table, uv_to_texel, TexelSample, TexelTable};

use nalgebra::Point2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("uv coordinate ({u}, {v}) of face {face} outside [0,1]^2")]
    UvOutOfRange { face: usize, u: f64, v: f64 },
    #[error("chart index {chart} of face {face} exceeds chart count {count}")]
    ChartOutOfRange { face: usize, chart: usize, count: usize },
    #[error("texel table resolution {resolution} too small (minimum 8)")]
    ResolutionTooSmall { resolution: usize },
    #[error("atlas has {atlas} faces but the template has {template}")]
    FaceCountMismatch { atlas: usize, template: usize },
    #[error("overlapping charts: colliding face pairs {faces:?}")]
    OverlappingCharts { faces: Vec<(usize, usize)> },
    #[error("image dimensions {a:?} and {b:?} differ")]
    ImageSizeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("unknown part index {part} (part mapping has {count} parts)")]
    UnknownPart { part: u8, count: usize },
    #[error("label {label} at texel/pixel {texel} outside the palette of {palette} entries")]
    LabelOutOfPalette { texel: usize, label: u8, palette: usize },
    #[error("map resolution {map} does not match table resolution {table}")]
    ResolutionMismatch { map: usize, table: usize },
    #[error("offset magnitude {magnitude} at vertex {vertex} exceeds the cap {cap}")]
    OffsetExceedsCap { vertex: usize, magnitude: f64, cap: f64 },
    #[error("displacement scale {scale} must be positive")]
    BadDisplacementScale { scale: f64 },
}

/// Per-face, per-corner UV coordinates plus the face-to-chart assignment.
/// Resolution independent; rasterize with [`build_texel_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct UvAtlas {
    face_uvs: Vec<[Point2<f64>; 3]>,
    chart_of_face: Vec<usize>,
    chart_count: usize,
}

impl UvAtlas {
    pub fn new(
        face_uvs: Vec<[Point2<f64>; 3]>,
        chart_of_face: Vec<usize>,
        chart_count: usize,
    ) -> Result<Self, AtlasError> {
        assert_eq!(face_uvs.len(), chart_of_face.len());
        for (f, uvs) in face_uvs.iter().enumerate() {
            for p in uvs {
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                    return Err(AtlasError::UvOutOfRange { face: f, u: p.x, v: p.y });
                }
            }
        }
        for (f, &c) in chart_of_face.iter().enumerate() {
            if c >= chart_count {
                return Err(AtlasError::ChartOutOfRange { face: f, chart: c, count: chart_count });
            }
        }
        Ok(Self { face_uvs, chart_of_face, chart_count })
    }

    pub fn face_count(&self) -> usize {
        self.face_uvs.len()
    }

    pub fn chart_count(&self) -> usize {
        self.chart_count
    }

    pub fn face_uvs(&self) -> &[[Point2<f64>; 3]] {
        &self.face_uvs
    }

    pub fn chart_of_face(&self, face: usize) -> usize {
        self.chart_of_face[face]
    }
}

/// Axis-aligned rectangle in global UV space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UvRect {
    pub u0: f64,
    pub v0: f64,
    pub width: f64,
    pub height: f64,
}

impl UvRect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u0 + self.width && v >= self.v0 && v < self.v0 + self.height
    }
}

/// Mapping between IUV part charts and the global atlas: part index i
/// (1-based; 0 means "no person") occupies `rects[i - 1]`, with part-local
/// coordinates spanning the rectangle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PartMap {
    pub rects: Vec<UvRect>,
}

impl PartMap {
    pub fn part_count(&self) -> usize {
        self.rects.len()
    }

    /// Part-local to global UV. Errors on part index 0 or out of range.
    pub fn to_global(&self, part: u8, u: f64, v: f64) -> Result<(f64, f64), AtlasError> {
        if part == 0 || part as usize > self.rects.len() {
            return Err(AtlasError::UnknownPart { part, count: self.rects.len() });
        }
        let r = &self.rects[part as usize - 1];
        Ok((r.u0 + u * r.width, r.v0 + v * r.height))
    }

    /// Global UV to (part, local u, local v); `None` when no rect contains
    /// the point. Rects are searched in order, so overlaps resolve to the
    /// lowest part index.
    pub fn to_part(&self, u: f64, v: f64) -> Option<(u8, f64, f64)> {
        for (i, r) in self.rects.iter().enumerate() {
            if r.contains(u, v) {
                return Some((
                    (i + 1) as u8,
                    (u - r.u0) / r.width,
                    (v - r.v0) / r.height,
                ));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn part_map_roundtrip() {
        let pm = PartMap {
            rects: vec![
                UvRect { u0: 0.0, v0: 0.0, width: 0.5, height: 0.5 },
                UvRect { u0: 0.5, v0: 0.5, width: 0.25, height: 0.25 },
            ],
        };
        let (u, v) = pm.to_global(2, 0.4, 0.8).unwrap();
        let (p, lu, lv) = pm.to_part(u, v).unwrap();
        assert_eq!(p, 2);
        assert!((lu - 0.4).abs() < 1e-12);
        assert!((lv - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unknown_part_is_an_error() {
        let pm = PartMap { rects: vec![] };
        assert!(pm.to_global(1, 0.5, 0.5).is_err());
        assert!(pm.to_global(0, 0.5, 0.5).is_err());
    }

    #[test]
    fn atlas_rejects_out_of_range_uv() {
        let err = UvAtlas::new(
            vec![[
                Point2::new(0.0, 0.0),
                Point2::new(1.2, 0.0),
                Point2::new(0.0, 1.0),
            ]],
            vec![0],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, AtlasError::UvOutOfRange { face: 0, .. }));
    }
}
