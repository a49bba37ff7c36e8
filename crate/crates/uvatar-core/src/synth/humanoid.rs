//! Procedural capsule-limb humanoid: tube-per-part geometry with watertight
//! caps, one UV chart per part, distance-to-bone skinning weights, ring
//! centroid joint regressor, and a sagittal symmetry pairing.
//!
//! Every vertex UV sits on the (n + 0.5)/512 lattice, so at a 512 texel
//! table each vertex owns the texel under its own UV corner; displacement
//! round trips are then limited by quantization alone.

use std::collections::BTreeMap;

use nalgebra::{Point2, Point3, Vector3};

use super::{HumanoidSpec, SynthError};
use crate::body_model::{BodyTemplate, DisplacementField};
use crate::uv_atlas::{
    LabelPalette, PartMap, SegmentationMap, TexelTable, UvAtlas, UvRect, LABEL_HAIR, LABEL_LOWER,
    LABEL_SHOES, LABEL_SKIN, LABEL_UPPER,
};

/// Which limb family a chart belongs to, for garment-length edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LimbKind {
    Arm,
    Leg,
}

/// A limb parameterization: texels of `charts` get a coordinate in [0, 1]
/// along the segment from the start joint to the tip.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LimbDef {
    pub name: String,
    pub kind: LimbKind,
    pub charts: Vec<usize>,
    pub start_joint: usize,
    pub tip: [f64; 3],
}

/// The full synthetic character: template, atlas, and the bookkeeping the
/// pipeline stages need (part mapping, palette, reference labels, limb
/// parameterizations, hand/foot vertex sets).
#[derive(Debug, Clone)]
pub struct Humanoid {
    pub template: BodyTemplate,
    pub atlas: UvAtlas,
    pub part_map: PartMap,
    pub palette: LabelPalette,
    pub part_names: Vec<String>,
    /// Reference garment label per face.
    pub face_labels: Vec<u8>,
    pub hand_vertices: Vec<usize>,
    pub foot_vertices: Vec<usize>,
    pub limbs: Vec<LimbDef>,
}

impl Humanoid {
    /// Ground-truth segmentation: each valid texel takes its face's label.
    pub fn reference_segmentation(&self, table: &TexelTable) -> SegmentationMap {
        let mut seg = SegmentationMap::new(table.resolution(), self.palette.clone());
        for &t in table.valid_indices() {
            let f = table.sample(t).unwrap().face;
            seg.labels[t] = self.face_labels[f];
            seg.valid[t] = true;
        }
        seg
    }

    /// Per-texel limb coordinates; `None` for texels outside every limb.
    pub fn limb_coordinates(&self, table: &TexelTable) -> Vec<Option<(LimbKind, f64)>> {
        limb_coordinates(&self.limbs, &self.template, table)
    }
}

/// Compute limb coordinates from limb definitions: each texel of a limb
/// chart projects its rest-pose position onto the joint-to-tip segment.
pub fn limb_coordinates(
    limbs: &[LimbDef],
    template: &BodyTemplate,
    table: &TexelTable,
) -> Vec<Option<(LimbKind, f64)>> {
    let r = table.resolution();
    let mut out = vec![None; r * r];
    let joints = match template.joints(&crate::body_model::ShapeParams(vec![
        0.0;
        template.shape_dim()
    ])) {
        Ok(j) => j,
        Err(_) => return out,
    };
    for limb in limbs {
        let start = joints[limb.start_joint];
        let tip = Point3::new(limb.tip[0], limb.tip[1], limb.tip[2]);
        let axis = tip - start;
        let len2 = axis.norm_squared();
        if len2 == 0.0 {
            continue;
        }
        for &t in table.valid_indices() {
            let chart = table.chart_of_texel(t).unwrap();
            if !limb.charts.contains(&chart) {
                continue;
            }
            if let Some(p) = table.texel_position(t, template.vertices(), template.faces()) {
                let s = ((p - start).dot(&axis) / len2).clamp(0.0, 1.0);
                out[t] = Some((limb.kind, s));
            }
        }
    }
    out
}

const LATTICE: f64 = 512.0;

struct PartSpec {
    name: &'static str,
    a: Point3<f64>,
    b: Point3<f64>,
    radius: f64,
    label: u8,
    /// Build as the sagittal mirror of another part.
    mirror_of: Option<usize>,
    /// Rings at or beyond this index relabel to shoes.
    shoe_rings_from: Option<usize>,
}

struct PartMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    face_uvs: Vec<[Point2<f64>; 3]>,
    face_rings: Vec<usize>, // dominant ring per face, for shoe labeling
}

/// One tube with flat cap fans. Local vertex order: rings row-major, then
/// bottom pole (a end), then top pole (b end).
fn build_tube(
    a: &Point3<f64>,
    b: &Point3<f64>,
    radius: f64,
    cols: usize,
    rows: usize,
    rect: &UvRect,
    mirror_symmetric_triangulation: bool,
) -> PartMesh {
    let axis = (b - a).normalize();
    let p = if axis.y.abs() > 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let p = (p - axis * p.dot(&axis)).normalize();
    let q = axis.cross(&p);

    let rings = rows + 1;
    let mut vertices = Vec::with_capacity(rings * cols + 2);
    for r in 0..rings {
        let center = a + (b - a) * (r as f64 / rows as f64);
        for i in 0..cols {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / cols as f64;
            // Plus sin keeps the quad winding outward for q = axis x p.
            vertices.push(center + (p * phi.cos() + q * phi.sin()) * radius);
        }
    }
    let bottom_pole = vertices.len();
    vertices.push(*a);
    let top_pole = vertices.len();
    vertices.push(*b);

    // UV lattice: all corners on the (n + 0.5)/512 grid inside the rect.
    let su = ((rect.width * LATTICE - 1.0) / cols as f64).floor();
    let sv = ((rect.height * LATTICE - 1.0) / (rows + 2) as f64).floor();
    let u_col = |i: usize| rect.u0 + (su * i as f64 + 0.5) / LATTICE;
    let v_ring = |r: usize| rect.v0 + (sv * (r + 1) as f64 + 0.5) / LATTICE;
    let v_bottom = rect.v0 + 0.5 / LATTICE;
    let v_top = rect.v0 + (sv * (rows + 2) as f64 + 0.5) / LATTICE;
    let u_pole = u_col(cols / 2);

    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let mut face_rings = Vec::new();
    let vid = |r: usize, i: usize| r * cols + (i % cols);
    let uv = |r: usize, i: usize| Point2::new(u_col(i), v_ring(r));

    for r in 0..rows {
        for j in 0..cols {
            // Under the sagittal mirror, quad j maps to quad
            // (cols/2 - 1 - j) mod cols; alternate the split diagonal so the
            // triangulation is itself mirror symmetric.
            let partner = (cols as isize / 2 - 1 - j as isize).rem_euclid(cols as isize) as usize;
            let main_diag = !mirror_symmetric_triangulation || j < partner;
            if main_diag {
                faces.push([vid(r, j), vid(r, j + 1), vid(r + 1, j + 1)]);
                face_uvs.push([uv(r, j), uv(r, j + 1), uv(r + 1, j + 1)]);
                faces.push([vid(r, j), vid(r + 1, j + 1), vid(r + 1, j)]);
                face_uvs.push([uv(r, j), uv(r + 1, j + 1), uv(r + 1, j)]);
            } else {
                faces.push([vid(r, j), vid(r, j + 1), vid(r + 1, j)]);
                face_uvs.push([uv(r, j), uv(r, j + 1), uv(r + 1, j)]);
                faces.push([vid(r, j + 1), vid(r + 1, j + 1), vid(r + 1, j)]);
                face_uvs.push([uv(r, j + 1), uv(r + 1, j + 1), uv(r + 1, j)]);
            }
            face_rings.push(r);
            face_rings.push(r);
        }
    }
    for j in 0..cols {
        faces.push([bottom_pole, vid(0, j + 1), vid(0, j)]);
        face_uvs.push([Point2::new(u_pole, v_bottom), uv(0, j + 1), uv(0, j)]);
        face_rings.push(0);
        faces.push([top_pole, vid(rows, j), vid(rows, j + 1)]);
        face_uvs.push([Point2::new(u_pole, v_top), uv(rows, j), uv(rows, j + 1)]);
        face_rings.push(rows);
    }

    PartMesh { vertices, faces, face_uvs, face_rings }
}

/// Sagittal mirror of a part: positions with x negated, winding reversed so
/// normals stay outward, UVs translated into the destination rect.
fn mirrored_part(src: &PartMesh, src_rect: &UvRect, dst_rect: &UvRect) -> PartMesh {
    let du = dst_rect.u0 - src_rect.u0;
    let dv = dst_rect.v0 - src_rect.v0;
    PartMesh {
        vertices: src
            .vertices
            .iter()
            .map(|p| Point3::new(-p.x, p.y, p.z))
            .collect(),
        faces: src.faces.iter().map(|[a, b, c]| [*a, *c, *b]).collect(),
        face_uvs: src
            .face_uvs
            .iter()
            .map(|[a, b, c]| {
                [
                    Point2::new(a.x + du, a.y + dv),
                    Point2::new(c.x + du, c.y + dv),
                    Point2::new(b.x + du, b.y + dv),
                ]
            })
            .collect(),
        face_rings: src.face_rings.clone(),
    }
}

fn slot_rect(slot: usize) -> UvRect {
    let col = slot % 4;
    let row = slot / 4;
    UvRect {
        u0: col as f64 * 0.25 + 8.0 / LATTICE,
        v0: row as f64 * 0.25 + 8.0 / LATTICE,
        width: 112.0 / LATTICE,
        height: 112.0 / LATTICE,
    }
}

pub fn make_humanoid(spec: &HumanoidSpec) -> Result<Humanoid, SynthError> {
    if spec.scale <= 0.0 || !spec.scale.is_finite() {
        return Err(SynthError::BadSpec { reason: format!("scale must be positive, got {}", spec.scale) });
    }
    if spec.ring_segments < 8 || spec.ring_segments % 2 != 0 {
        return Err(SynthError::BadSpec {
            reason: format!("ring_segments must be even and >= 8, got {}", spec.ring_segments),
        });
    }
    if spec.length_segments < 4 {
        return Err(SynthError::BadSpec {
            reason: format!("length_segments must be >= 4, got {}", spec.length_segments),
        });
    }
    match spec.joint_count {
        2 => build_chain(spec),
        16 => build_biped(spec),
        other => Err(SynthError::BadSpec {
            reason: format!("joint_count must be 2 or 16, got {other}"),
        }),
    }
}

fn build_biped(spec: &HumanoidSpec) -> Result<Humanoid, SynthError> {
    let s = spec.scale;
    let pt = |x: f64, y: f64, z: f64| Point3::new(x * s, y * s, z * s);
    let parts = vec![
        PartSpec { name: "torso", a: pt(0.0, 0.90, 0.0), b: pt(0.0, 1.52, 0.0), radius: 0.16 * s, label: LABEL_UPPER, mirror_of: None, shoe_rings_from: None },
        PartSpec { name: "head", a: pt(0.0, 1.57, 0.0), b: pt(0.0, 1.82, 0.0), radius: 0.09 * s, label: LABEL_HAIR, mirror_of: None, shoe_rings_from: None },
        PartSpec { name: "upper_arm_l", a: pt(0.20, 1.45, 0.0), b: pt(0.50, 1.45, 0.0), radius: 0.05 * s, label: LABEL_UPPER, mirror_of: None, shoe_rings_from: None },
        PartSpec { name: "upper_arm_r", a: pt(-0.20, 1.45, 0.0), b: pt(-0.50, 1.45, 0.0), radius: 0.05 * s, label: LABEL_UPPER, mirror_of: Some(2), shoe_rings_from: None },
        PartSpec { name: "forearm_l", a: pt(0.50, 1.45, 0.0), b: pt(0.92, 1.45, 0.0), radius: 0.045 * s, label: LABEL_SKIN, mirror_of: None, shoe_rings_from: None },
        PartSpec { name: "forearm_r", a: pt(-0.50, 1.45, 0.0), b: pt(-0.92, 1.45, 0.0), radius: 0.045 * s, label: LABEL_SKIN, mirror_of: Some(4), shoe_rings_from: None },
        PartSpec { name: "thigh_l", a: pt(0.10, 0.895, 0.0), b: pt(0.10, 0.55, 0.0), radius: 0.075 * s, label: LABEL_LOWER, mirror_of: None, shoe_rings_from: None },
        PartSpec { name: "thigh_r", a: pt(-0.10, 0.895, 0.0), b: pt(-0.10, 0.55, 0.0), radius: 0.075 * s, label: LABEL_LOWER, mirror_of: Some(6), shoe_rings_from: None },
        PartSpec { name: "calf_l", a: pt(0.10, 0.55, 0.0), b: pt(0.10, 0.02, 0.0), radius: 0.055 * s, label: LABEL_LOWER, mirror_of: None, shoe_rings_from: Some(3 * spec.length_segments / 4) },
        PartSpec { name: "calf_r", a: pt(-0.10, 0.55, 0.0), b: pt(-0.10, 0.02, 0.0), radius: 0.055 * s, label: LABEL_LOWER, mirror_of: Some(8), shoe_rings_from: Some(3 * spec.length_segments / 4) },
    ];

    let cols = spec.ring_segments;
    let rows = spec.length_segments;
    let built = build_parts(&parts, cols, rows);

    // Joint table: (name, part, ring, parent).
    let ankle_ring = 3 * rows / 4;
    let wrist_ring = 3 * rows / 4;
    let joint_table: Vec<(&str, usize, usize, Option<usize>)> = vec![
        ("pelvis", 0, rows / 8 + 1, None),
        ("spine", 0, 3 * rows / 8, Some(0)),
        ("chest", 0, 3 * rows / 4, Some(1)),
        ("neck", 1, 0, Some(2)),
        ("hip_l", 6, 0, Some(0)),
        ("knee_l", 6, rows, Some(4)),
        ("ankle_l", 8, ankle_ring, Some(5)),
        ("hip_r", 7, 0, Some(0)),
        ("knee_r", 7, rows, Some(7)),
        ("ankle_r", 9, ankle_ring, Some(8)),
        ("shoulder_l", 2, 0, Some(2)),
        ("elbow_l", 4, 0, Some(10)),
        ("wrist_l", 4, wrist_ring, Some(11)),
        ("shoulder_r", 3, 0, Some(2)),
        ("elbow_r", 5, 0, Some(13)),
        ("wrist_r", 5, wrist_ring, Some(14)),
    ];

    // Influence segments for skinning falloff: joint -> (start, end).
    let joints_pos: Vec<Point3<f64>> = joint_table
        .iter()
        .map(|&(_, part, ring, _)| ring_centroid(&built, part, ring, cols))
        .collect();
    let seg_end = |j: usize| -> Point3<f64> {
        match j {
            0 => joints_pos[1],
            1 => joints_pos[2],
            2 => joints_pos[3],
            3 => pt(0.0, 1.82, 0.0),
            4 => joints_pos[5],
            5 => joints_pos[6],
            6 => pt(0.10, 0.02, 0.0),
            7 => joints_pos[8],
            8 => joints_pos[9],
            9 => pt(-0.10, 0.02, 0.0),
            10 => joints_pos[11],
            11 => joints_pos[12],
            12 => pt(0.92, 1.45, 0.0),
            13 => joints_pos[14],
            14 => joints_pos[15],
            15 => pt(-0.92, 1.45, 0.0),
            _ => unreachable!(),
        }
    };
    let segments: Vec<(Point3<f64>, Point3<f64>)> =
        (0..16).map(|j| (joints_pos[j], seg_end(j))).collect();

    let parents: Vec<Option<usize>> = joint_table.iter().map(|t| t.3).collect();
    let regressor = ring_regressor(&built, &joint_table, cols);
    let weights = falloff_weights(&built.vertices, &segments, 0.08 * s);
    let symmetry = symmetry_pairs(&built, &parts, cols);
    let shape_basis = biped_shape_basis(&built.vertices, s);

    let template = BodyTemplate::new(
        built.vertices.clone(),
        built.faces.clone(),
        weights,
        regressor,
        parents,
        shape_basis,
        None,
        symmetry,
    )
    .map_err(SynthError::from)?;
    let atlas = UvAtlas::new(built.face_uvs.clone(), built.chart_of_face.clone(), parts.len())?;

    let part_map = PartMap { rects: (0..parts.len()).map(slot_rect).collect() };
    let hand_vertices = limb_extremity(&built, &[4, 5], wrist_ring, cols, rows);
    let foot_vertices = limb_extremity(&built, &[8, 9], ankle_ring, cols, rows);

    let tip = |p: Point3<f64>| [p.x, p.y, p.z];
    let limbs = vec![
        LimbDef { name: "arm_l".into(), kind: LimbKind::Arm, charts: vec![2, 4], start_joint: 10, tip: tip(pt(0.92, 1.45, 0.0)) },
        LimbDef { name: "arm_r".into(), kind: LimbKind::Arm, charts: vec![3, 5], start_joint: 13, tip: tip(pt(-0.92, 1.45, 0.0)) },
        LimbDef { name: "leg_l".into(), kind: LimbKind::Leg, charts: vec![6, 8], start_joint: 4, tip: tip(pt(0.10, 0.02, 0.0)) },
        LimbDef { name: "leg_r".into(), kind: LimbKind::Leg, charts: vec![7, 9], start_joint: 7, tip: tip(pt(-0.10, 0.02, 0.0)) },
    ];

    Ok(Humanoid {
        template,
        atlas,
        part_map,
        palette: LabelPalette::default(),
        part_names: parts.iter().map(|p| p.name.to_string()).collect(),
        face_labels: built.face_labels,
        hand_vertices,
        foot_vertices,
        limbs,
    })
}

fn build_chain(spec: &HumanoidSpec) -> Result<Humanoid, SynthError> {
    let s = spec.scale;
    let parts = vec![PartSpec {
        name: "bone",
        a: Point3::new(0.0, 0.0, 0.0),
        b: Point3::new(0.0, s, 0.0),
        radius: 0.1 * s,
        label: LABEL_SKIN,
        mirror_of: None,
        shoe_rings_from: None,
    }];
    let cols = spec.ring_segments;
    let rows = spec.length_segments;
    let built = build_parts(&parts, cols, rows);

    let joint_table: Vec<(&str, usize, usize, Option<usize>)> =
        vec![("root", 0, 0, None), ("mid", 0, rows / 2, Some(0))];
    let joints_pos: Vec<Point3<f64>> = joint_table
        .iter()
        .map(|&(_, part, ring, _)| ring_centroid(&built, part, ring, cols))
        .collect();
    let segments = vec![
        (joints_pos[0], joints_pos[1]),
        (joints_pos[1], Point3::new(0.0, s, 0.0)),
    ];
    let regressor = ring_regressor(&built, &joint_table, cols);
    let weights = falloff_weights(&built.vertices, &segments, 0.15 * s);
    let symmetry = symmetry_pairs(&built, &parts, cols);

    let template = BodyTemplate::new(
        built.vertices.clone(),
        built.faces.clone(),
        weights,
        regressor,
        vec![None, Some(0)],
        vec![],
        None,
        symmetry,
    )?;
    let atlas = UvAtlas::new(built.face_uvs.clone(), built.chart_of_face.clone(), 1)?;
    Ok(Humanoid {
        template,
        atlas,
        part_map: PartMap { rects: vec![slot_rect(0)] },
        palette: LabelPalette::default(),
        part_names: vec!["bone".into()],
        face_labels: built.face_labels,
        hand_vertices: vec![],
        foot_vertices: vec![],
        limbs: vec![],
    })
}

struct BuiltParts {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    face_uvs: Vec<[Point2<f64>; 3]>,
    chart_of_face: Vec<usize>,
    face_labels: Vec<u8>,
    part_vertex_base: Vec<usize>,
    part_vertex_count: usize,
}

fn build_parts(parts: &[PartSpec], cols: usize, rows: usize) -> BuiltParts {
    let mut meshes: Vec<PartMesh> = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let rect = slot_rect(i);
        let mesh = match p.mirror_of {
            None => build_tube(&p.a, &p.b, p.radius, cols, rows, &rect, true),
            Some(src) => mirrored_part(&meshes[src], &slot_rect(src), &rect),
        };
        meshes.push(mesh);
    }

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let mut chart_of_face = Vec::new();
    let mut face_labels = Vec::new();
    let mut part_vertex_base = Vec::with_capacity(parts.len());
    for (i, mesh) in meshes.iter().enumerate() {
        let base = vertices.len();
        part_vertex_base.push(base);
        vertices.extend_from_slice(&mesh.vertices);
        for (f, face) in mesh.faces.iter().enumerate() {
            faces.push([face[0] + base, face[1] + base, face[2] + base]);
            face_uvs.push(mesh.face_uvs[f]);
            chart_of_face.push(i);
            let label = match parts[i].shoe_rings_from {
                Some(from) if mesh.face_rings[f] >= from => LABEL_SHOES,
                _ => parts[i].label,
            };
            face_labels.push(label);
        }
    }
    let part_vertex_count = meshes[0].vertices.len();
    BuiltParts {
        vertices,
        faces,
        face_uvs,
        chart_of_face,
        face_labels,
        part_vertex_base,
        part_vertex_count,
    }
}

fn ring_centroid(built: &BuiltParts, part: usize, ring: usize, cols: usize) -> Point3<f64> {
    let base = built.part_vertex_base[part] + ring * cols;
    let mut c = Vector3::zeros();
    for i in 0..cols {
        c += built.vertices[base + i].coords;
    }
    Point3::from(c / cols as f64)
}

fn ring_regressor(
    built: &BuiltParts,
    joint_table: &[(&str, usize, usize, Option<usize>)],
    cols: usize,
) -> Vec<Vec<(usize, f64)>> {
    joint_table
        .iter()
        .map(|&(_, part, ring, _)| {
            let base = built.part_vertex_base[part] + ring * cols;
            (0..cols).map(|i| (base + i, 1.0 / cols as f64)).collect()
        })
        .collect()
}

fn point_segment_distance(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Gaussian falloff of distance to each joint's influence segment, row
/// normalized. Tiny weights are dropped to keep rows sparse.
fn falloff_weights(
    vertices: &[Point3<f64>],
    segments: &[(Point3<f64>, Point3<f64>)],
    sigma: f64,
) -> Vec<Vec<(usize, f64)>> {
    vertices
        .iter()
        .map(|v| {
            let raw: Vec<f64> = segments
                .iter()
                .map(|(a, b)| {
                    let d = point_segment_distance(v, a, b);
                    (-(d / sigma).powi(2)).exp()
                })
                .collect();
            let max = raw.iter().cloned().fold(f64::MIN, f64::max);
            let kept: Vec<(usize, f64)> = raw
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 1e-6 * max)
                .map(|(i, &w)| (i, w))
                .collect();
            let sum: f64 = kept.iter().map(|(_, w)| w).sum();
            kept.into_iter().map(|(i, w)| (i, w / sum)).collect()
        })
        .collect()
}

/// Sagittal symmetry: mirrored part pairs match by local index; the torso
/// and head pair ring columns across the plane (phi to pi - phi).
fn symmetry_pairs(built: &BuiltParts, parts: &[PartSpec], cols: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut handled = vec![false; parts.len()];
    for (i, p) in parts.iter().enumerate() {
        if let Some(src) = p.mirror_of {
            let a = built.part_vertex_base[src];
            let b = built.part_vertex_base[i];
            for k in 0..built.part_vertex_count {
                pairs.push((a + k, b + k));
            }
            handled[i] = true;
            handled[src] = true;
        }
    }
    for (i, _) in parts.iter().enumerate() {
        if handled[i] {
            continue;
        }
        // Self-symmetric tube: column j pairs with (cols/2 - j) mod cols.
        let base = built.part_vertex_base[i];
        let rings = (built.part_vertex_count - 2) / cols;
        for r in 0..rings {
            for j in 0..cols {
                let m = (cols as isize / 2 - j as isize).rem_euclid(cols as isize) as usize;
                if j < m {
                    pairs.push((base + r * cols + j, base + r * cols + m));
                }
            }
        }
        // Poles are on the plane: identity.
    }
    pairs
}

fn biped_shape_basis(vertices: &[Point3<f64>], scale: f64) -> Vec<DisplacementField> {
    let pivot = 0.95 * scale;
    let height: DisplacementField = vertices
        .iter()
        .map(|v| Vector3::new(0.0, 0.12 * (v.y - pivot), 0.0))
        .collect();
    let girth: DisplacementField = vertices
        .iter()
        .map(|v| Vector3::new(0.06 * v.x, 0.0, 0.10 * v.z))
        .collect();
    vec![height, girth]
}

/// Vertices at or beyond a ring (plus the far pole) in the listed parts:
/// hands live past the wrist ring of the forearms, feet past the ankle ring
/// of the calves.
fn limb_extremity(
    built: &BuiltParts,
    parts: &[usize],
    from_ring: usize,
    cols: usize,
    rows: usize,
) -> Vec<usize> {
    let mut out = Vec::new();
    for &p in parts {
        let base = built.part_vertex_base[p];
        for r in from_ring..=rows {
            for i in 0..cols {
                out.push(base + r * cols + i);
            }
        }
        out.push(base + (rows + 1) * cols + 1); // pole at the b end
    }
    let mut map = BTreeMap::new();
    for v in out {
        map.insert(v, ());
    }
    map.into_keys().collect()
}
