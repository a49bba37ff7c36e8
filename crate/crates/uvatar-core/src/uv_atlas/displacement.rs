//! Baking clothing offsets into displacement maps and reading them back.

use nalgebra::Vector3;

use super::maps::DisplacementMap;
use super::texel_table::TexelTable;
use super::AtlasError;
use crate::body_model::{BodyTemplate, OffsetField};

/// Bake per-vertex offsets into a displacement map: every valid texel stores
/// the barycentric interpolation of its face's corner offsets. The map scale
/// is the largest offset component, or the field's cap when that is larger,
/// so decoded values always fit.
pub fn bake_displacement(
    offsets: &OffsetField,
    table: &TexelTable,
    template: &BodyTemplate,
) -> Result<DisplacementMap, AtlasError> {
    for (v, o) in offsets.offsets.iter().enumerate() {
        let m = o.norm();
        if m > offsets.cap {
            return Err(AtlasError::OffsetExceedsCap { vertex: v, magnitude: m, cap: offsets.cap });
        }
    }
    let scale = offsets.max_component().max(offsets.cap);
    let mut map = DisplacementMap::new(table.resolution(), scale)?;
    let faces = template.faces();
    for &t in table.valid_indices() {
        let s = table.sample(t).unwrap();
        let [a, b, c] = faces[s.face];
        let bc = s.barycentric;
        let value = offsets.offsets[a] * bc[0] + offsets.offsets[b] * bc[1] + offsets.offsets[c] * bc[2];
        map.encode(t, &value);
        map.valid[t] = true;
    }
    Ok(map)
}

/// Offsets recovered from a displacement map plus the fraction of vertices
/// that had a valid owning texel.
#[derive(Debug, Clone)]
pub struct AppliedOffsets {
    pub field: OffsetField,
    pub coverage: f64,
}

/// Read a displacement map back into per-vertex offsets: each vertex decodes
/// the texel it owns (the valid texel where its corner carries the greatest
/// barycentric weight); uncovered vertices get zero.
pub fn apply_displacement(
    map: &DisplacementMap,
    table: &TexelTable,
    template: &BodyTemplate,
) -> Result<AppliedOffsets, AtlasError> {
    if map.resolution != table.resolution() {
        return Err(AtlasError::ResolutionMismatch { map: map.resolution, table: table.resolution() });
    }
    let n = template.vertex_count();
    let mut offsets = vec![Vector3::zeros(); n];
    let mut covered = 0usize;
    for v in 0..n {
        if let Some((t, _)) = table.vertex_owner(v) {
            if map.valid[t] {
                offsets[v] = map.decode(t);
                covered += 1;
            }
        }
    }
    let cap = map.scale.max(crate::body_model::DEFAULT_OFFSET_CAP);
    let field = OffsetField { offsets, cap };
    Ok(AppliedOffsets {
        field,
        coverage: if n == 0 { 1.0 } else { covered as f64 / n as f64 },
    })
}
