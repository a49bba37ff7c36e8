//! Serialization: the canonical model descriptor, map images with validity
//! masks, scans, cameras, 2D joint files, pose vectors, displacement priors,
//! and textured mesh export.
//!
//! Text formats are JSON with shortest round-trip float formatting, so every
//! save/load pair is bit exact on valid data. Map images are PNG: validity
//! rides in the alpha channel, invalid texels are zeroed on write.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{BodyTemplate, PoseBasis, PoseParams};
use crate::mesh::Mesh;
use crate::registration::{Camera, JointObservations, Scan};
use crate::synth::{Humanoid, LimbDef};
use crate::uv_atlas::{
    DisplacementMap, IuvImage, LabelPalette, PartMap, SegmentationMap, TextureMap, UvAtlas,
};

pub const MODEL_SCHEMA: &str = "model.v1";
pub const DISPLACEMENT_SCHEMA: &str = "displacement.v1";
pub const PRIOR_SCHEMA: &str = "prior.v1";

#[derive(Debug, Error)]
pub enum IoFormatError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("image error on {path}: {source}")]
    Image { path: String, source: image::error::ImageError },
    #[error("json error on {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("schema mismatch in {path}: expected {expected}, found {found}")]
    Schema { path: String, expected: String, found: String },
    #[error("invalid data in {path}: {message}")]
    BadData { path: String, message: String },
    #[error(transparent)]
    BodyModel(#[from] crate::body_model::BodyModelError),
    #[error(transparent)]
    Atlas(#[from] crate::uv_atlas::AtlasError),
    #[error(transparent)]
    Registration(#[from] crate::registration::RegistrationError),
}

fn io_err(path: &Path, source: std::io::Error) -> IoFormatError {
    IoFormatError::Io { path: path.display().to_string(), source }
}

fn image_err(path: &Path, source: image::error::ImageError) -> IoFormatError {
    IoFormatError::Image { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> IoFormatError {
    IoFormatError::Json { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoFormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoFormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// The canonical single-document model description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDescriptor {
    pub schema: String,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// (vertex, joint, weight) triplets.
    pub skin_weights: Vec<(usize, usize, f64)>,
    /// (joint, vertex, weight) triplets.
    pub joint_regressor: Vec<(usize, usize, f64)>,
    /// Parent per joint, -1 for the root.
    pub parents: Vec<i64>,
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    #[serde(default)]
    pub pose_basis: Option<Vec<Vec<[f64; 3]>>>,
    pub symmetry_pairs: Vec<(usize, usize)>,
    pub atlas_face_uvs: Vec<[[f64; 2]; 3]>,
    pub atlas_chart_of_face: Vec<usize>,
    pub atlas_chart_count: usize,
    pub part_map: PartMap,
    pub palette_names: Vec<String>,
    pub palette_garment: Vec<bool>,
    #[serde(default)]
    pub limbs: Vec<LimbDef>,
    /// Reference garment label per face, for synthetic ground truth.
    #[serde(default)]
    pub face_labels: Vec<u8>,
}

/// A loaded, validated model.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub template: BodyTemplate,
    pub atlas: UvAtlas,
    pub part_map: PartMap,
    pub palette: LabelPalette,
    pub limbs: Vec<LimbDef>,
    pub face_labels: Vec<u8>,
}

impl ModelDescriptor {
    pub fn from_humanoid(h: &Humanoid) -> Self {
        let template = &h.template;
        let mut skin_weights = Vec::new();
        for (v, row) in template.skin_weights().iter().enumerate() {
            for &(j, w) in row {
                skin_weights.push((v, j, w));
            }
        }
        let mut joint_regressor = Vec::new();
        for (j, row) in template.joint_regressor().iter().enumerate() {
            for &(v, w) in row {
                joint_regressor.push((j, v, w));
            }
        }
        Self {
            schema: MODEL_SCHEMA.to_string(),
            vertices: template.vertices().iter().map(|p| [p.x, p.y, p.z]).collect(),
            faces: template.faces().to_vec(),
            skin_weights,
            joint_regressor,
            parents: template
                .parents()
                .iter()
                .map(|p| p.map(|v| v as i64).unwrap_or(-1))
                .collect(),
            shape_basis: template
                .shape_basis()
                .iter()
                .map(|field| field.iter().map(|v| [v.x, v.y, v.z]).collect())
                .collect(),
            pose_basis: template.pose_basis().map(|pb| {
                pb.fields
                    .iter()
                    .map(|field| field.iter().map(|v| [v.x, v.y, v.z]).collect())
                    .collect()
            }),
            symmetry_pairs: template.symmetry_pairs(),
            atlas_face_uvs: h
                .atlas
                .face_uvs()
                .iter()
                .map(|uvs| [[uvs[0].x, uvs[0].y], [uvs[1].x, uvs[1].y], [uvs[2].x, uvs[2].y]])
                .collect(),
            atlas_chart_of_face: (0..h.atlas.face_count()).map(|f| h.atlas.chart_of_face(f)).collect(),
            atlas_chart_count: h.atlas.chart_count(),
            part_map: h.part_map.clone(),
            palette_names: h.palette.names.clone(),
            palette_garment: h.palette.garment.clone(),
            limbs: h.limbs.clone(),
            face_labels: h.face_labels.clone(),
        }
    }

    pub fn build(&self, path_for_errors: &Path) -> Result<LoadedModel, IoFormatError> {
        if self.schema != MODEL_SCHEMA {
            return Err(IoFormatError::Schema {
                path: path_for_errors.display().to_string(),
                expected: MODEL_SCHEMA.to_string(),
                found: self.schema.clone(),
            });
        }
        let n = self.vertices.len();
        let mut skin_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(v, j, w) in &self.skin_weights {
            if v >= n {
                return Err(IoFormatError::BadData {
                    path: path_for_errors.display().to_string(),
                    message: format!("skin weight vertex {v} out of range"),
                });
            }
            skin_rows[v].push((j, w));
        }
        let k = self.parents.len();
        let mut regressor_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
        for &(j, v, w) in &self.joint_regressor {
            if j >= k {
                return Err(IoFormatError::BadData {
                    path: path_for_errors.display().to_string(),
                    message: format!("regressor joint {j} out of range"),
                });
            }
            regressor_rows[j].push((v, w));
        }
        let parents: Vec<Option<usize>> = self
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        let to_fields = |src: &Vec<Vec<[f64; 3]>>| {
            src.iter()
                .map(|field| field.iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect())
                .collect::<Vec<_>>()
        };
        let template = BodyTemplate::new(
            self.vertices.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            self.faces.clone(),
            skin_rows,
            regressor_rows,
            parents,
            to_fields(&self.shape_basis),
            self.pose_basis.as_ref().map(|pb| PoseBasis { fields: to_fields(pb) }),
            self.symmetry_pairs.clone(),
        )?;
        let atlas = UvAtlas::new(
            self.atlas_face_uvs
                .iter()
                .map(|uvs| {
                    [
                        Point2::new(uvs[0][0], uvs[0][1]),
                        Point2::new(uvs[1][0], uvs[1][1]),
                        Point2::new(uvs[2][0], uvs[2][1]),
                    ]
                })
                .collect(),
            self.atlas_chart_of_face.clone(),
            self.atlas_chart_count,
        )?;
        Ok(LoadedModel {
            template,
            atlas,
            part_map: self.part_map.clone(),
            palette: LabelPalette::new(self.palette_names.clone(), self.palette_garment.clone()),
            limbs: self.limbs.clone(),
            face_labels: self.face_labels.clone(),
        })
    }
}

pub fn save_model(path: &Path, descriptor: &ModelDescriptor) -> Result<(), IoFormatError> {
    write_json(path, descriptor)
}

pub fn load_model(path: &Path) -> Result<(ModelDescriptor, LoadedModel), IoFormatError> {
    let descriptor: ModelDescriptor = read_json(path)?;
    let loaded = descriptor.build(path)?;
    Ok((descriptor, loaded))
}

// ---------------------------------------------------------------------------
// Map images
// ---------------------------------------------------------------------------

/// RGBA8 PNG; alpha 255 marks valid texels, invalid texels are zeroed.
pub fn write_texture(path: &Path, map: &TextureMap) -> Result<(), IoFormatError> {
    let r = map.resolution as u32;
    let mut img = image::RgbaImage::new(r, r);
    for (t, px) in img.pixels_mut().enumerate() {
        if map.valid[t] {
            let c = map.pixels[t];
            *px = image::Rgba([c[0], c[1], c[2], 255]);
        } else {
            *px = image::Rgba([0, 0, 0, 0]);
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_texture(path: &Path) -> Result<TextureMap, IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgba8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(IoFormatError::BadData {
            path: path.display().to_string(),
            message: format!("texture maps are square, got {w}x{h}"),
        });
    }
    let mut map = TextureMap::new(w as usize);
    for (t, px) in img.pixels().enumerate() {
        map.valid[t] = px[3] >= 128;
        map.pixels[t] = if map.valid[t] { [px[0], px[1], px[2]] } else { [0, 0, 0] };
    }
    Ok(map)
}

/// RGBA8 PNG; palette index in the red channel, validity in alpha.
pub fn write_segmentation(path: &Path, map: &SegmentationMap) -> Result<(), IoFormatError> {
    let r = map.resolution as u32;
    let mut img = image::RgbaImage::new(r, r);
    for (t, px) in img.pixels_mut().enumerate() {
        if map.valid[t] {
            *px = image::Rgba([map.labels[t], 0, 0, 255]);
        } else {
            *px = image::Rgba([0, 0, 0, 0]);
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_segmentation(path: &Path, palette: &LabelPalette) -> Result<SegmentationMap, IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgba8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(IoFormatError::BadData {
            path: path.display().to_string(),
            message: format!("segmentation maps are square, got {w}x{h}"),
        });
    }
    let mut map = SegmentationMap::new(w as usize, palette.clone());
    for (t, px) in img.pixels().enumerate() {
        map.valid[t] = px[3] >= 128;
        map.labels[t] = if map.valid[t] { px[0] } else { 0 };
    }
    map.check_labels()?;
    Ok(map)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct DisplacementSidecar {
    schema: String,
    scale: f64,
    offset: [f64; 3],
    resolution: usize,
}

/// RGBA16 PNG (alpha = validity) plus a JSON sidecar `{scale, offset,
/// resolution}` at `path` with extension `.json`.
pub fn write_displacement(path: &Path, map: &DisplacementMap) -> Result<(), IoFormatError> {
    let r = map.resolution as u32;
    let mut img = image::ImageBuffer::<image::Rgba<u16>, Vec<u16>>::new(r, r);
    for (t, px) in img.pixels_mut().enumerate() {
        if map.valid[t] {
            let raw = map.raw[t];
            *px = image::Rgba([raw[0], raw[1], raw[2], u16::MAX]);
        } else {
            *px = image::Rgba([0, 0, 0, 0]);
        }
    }
    image::DynamicImage::ImageRgba16(img)
        .save(path)
        .map_err(|e| image_err(path, e))?;
    let sidecar = DisplacementSidecar {
        schema: DISPLACEMENT_SCHEMA.to_string(),
        scale: map.scale,
        offset: map.offset,
        resolution: map.resolution,
    };
    write_json(&path.with_extension("json"), &sidecar)
}

pub fn read_displacement(path: &Path) -> Result<DisplacementMap, IoFormatError> {
    let sidecar_path = path.with_extension("json");
    let sidecar: DisplacementSidecar = read_json(&sidecar_path)?;
    if sidecar.schema != DISPLACEMENT_SCHEMA {
        return Err(IoFormatError::Schema {
            path: sidecar_path.display().to_string(),
            expected: DISPLACEMENT_SCHEMA.to_string(),
            found: sidecar.schema,
        });
    }
    if sidecar.scale <= 0.0 {
        return Err(IoFormatError::BadData {
            path: sidecar_path.display().to_string(),
            message: format!("displacement scale must be positive, got {}", sidecar.scale),
        });
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgba16();
    let (w, h) = img.dimensions();
    if w != h || w as usize != sidecar.resolution {
        return Err(IoFormatError::BadData {
            path: path.display().to_string(),
            message: format!("expected {0}x{0} displacement image, got {w}x{h}", sidecar.resolution),
        });
    }
    let mut map = DisplacementMap::new(sidecar.resolution, sidecar.scale)?;
    map.offset = sidecar.offset;
    for (t, px) in img.pixels().enumerate() {
        map.valid[t] = px[3] >= u16::MAX / 2;
        map.raw[t] = if map.valid[t] {
            [px[0], px[1], px[2]]
        } else {
            [crate::uv_atlas::DISPLACEMENT_ZERO_RAW; 3]
        };
    }
    Ok(map)
}

/// RGB8 PNG: part index, quantized u, quantized v.
pub fn write_iuv(path: &Path, iuv: &IuvImage) -> Result<(), IoFormatError> {
    let mut img = image::RgbImage::new(iuv.width as u32, iuv.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        if iuv.part[i] > 0 {
            *px = image::Rgb([
                iuv.part[i],
                (iuv.u[i].clamp(0.0, 1.0) * 255.0).round() as u8,
                (iuv.v[i].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
        } else {
            *px = image::Rgb([0, 0, 0]);
        }
    }
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_iuv(path: &Path) -> Result<IuvImage, IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut iuv = IuvImage::new(w as usize, h as usize);
    for (i, px) in img.pixels().enumerate() {
        iuv.part[i] = px[0];
        if px[0] > 0 {
            iuv.u[i] = px[1] as f64 / 255.0;
            iuv.v[i] = px[2] as f64 / 255.0;
        }
    }
    Ok(iuv)
}

/// Plain RGB8 image (camera views, swatches).
pub fn write_color_image(path: &Path, img: &crate::uv_atlas::ColorImage) -> Result<(), IoFormatError> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = image::Rgb(img.pixels[i]);
    }
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn read_color_image(path: &Path) -> Result<crate::uv_atlas::ColorImage, IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = crate::uv_atlas::ColorImage::new(w as usize, h as usize);
    for (i, px) in img.pixels().enumerate() {
        out.pixels[i] = px.0;
    }
    Ok(out)
}

/// Label raster stored like a segmentation image (labels in red, opaque).
pub fn write_label_image(path: &Path, img: &crate::uv_atlas::LabelImage) -> Result<(), IoFormatError> {
    let mut out = image::RgbaImage::new(img.width as u32, img.height as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        *px = image::Rgba([img.labels[i], 0, 0, 255]);
    }
    out.save(path).map_err(|e| image_err(path, e))
}

pub fn read_label_image(path: &Path) -> Result<crate::uv_atlas::LabelImage, IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgba8();
    let (w, h) = img.dimensions();
    let mut out = crate::uv_atlas::LabelImage::new(w as usize, h as usize);
    for (i, px) in img.pixels().enumerate() {
        out.labels[i] = px[0];
    }
    Ok(out)
}

/// Per-view weight maps for stitching, stored as 16-bit grayscale PNG with
/// weights scaled by 1/65535 into [0, 1].
pub fn write_weight_map(path: &Path, weights: &[f64], resolution: usize) -> Result<(), IoFormatError> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(resolution as u32, resolution as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = image::Luma([(weights[i].clamp(0.0, 1.0) * 65535.0).round() as u16]);
    }
    image::DynamicImage::ImageLuma16(img)
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn read_weight_map(path: &Path) -> Result<(Vec<f64>, usize), IoFormatError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(IoFormatError::BadData {
            path: path.display().to_string(),
            message: format!("weight maps are square, got {w}x{h}"),
        });
    }
    Ok((img.pixels().map(|p| p[0] as f64 / 65535.0).collect(), w as usize))
}

// ---------------------------------------------------------------------------
// Scans, cameras, joints, poses
// ---------------------------------------------------------------------------

/// Read a scan from an ASCII `.xyz` point list or a minimal ASCII PLY
/// (vertex positions only). Malformed lines error with their line number.
pub fn read_scan(path: &Path) -> Result<Scan, IoFormatError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        lines.push((i + 1, line.map_err(|e| io_err(path, e))?));
    }
    let is_ply = lines.first().map(|(_, l)| l.trim() == "ply").unwrap_or(false);
    let parse_point = |line_no: usize, parts: &[&str]| -> Result<Point3<f64>, IoFormatError> {
        if parts.len() < 3 {
            return Err(IoFormatError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: format!("expected 3 coordinates, got {}", parts.len()),
            });
        }
        let mut c = [0.0; 3];
        for (k, p) in parts.iter().take(3).enumerate() {
            c[k] = p.parse::<f64>().map_err(|e| IoFormatError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: format!("bad coordinate {p:?}: {e}"),
            })?;
            if !c[k].is_finite() {
                return Err(IoFormatError::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    message: format!("non-finite coordinate {p:?}"),
                });
            }
        }
        Ok(Point3::new(c[0], c[1], c[2]))
    };

    let mut points = Vec::new();
    if is_ply {
        let mut vertex_count: Option<usize> = None;
        let mut header_end = None;
        for (idx, (line_no, line)) in lines.iter().enumerate() {
            let l = line.trim();
            if l.starts_with("element vertex") {
                let count = l.split_whitespace().nth(2).ok_or_else(|| IoFormatError::Parse {
                    path: path.display().to_string(),
                    line: *line_no,
                    message: "element vertex missing a count".into(),
                })?;
                vertex_count = Some(count.parse().map_err(|e| IoFormatError::Parse {
                    path: path.display().to_string(),
                    line: *line_no,
                    message: format!("bad vertex count {count:?}: {e}"),
                })?);
            }
            if l.starts_with("format") && !l.contains("ascii") {
                return Err(IoFormatError::Parse {
                    path: path.display().to_string(),
                    line: *line_no,
                    message: "only ascii PLY is supported".into(),
                });
            }
            if l == "end_header" {
                header_end = Some(idx);
                break;
            }
        }
        let (Some(count), Some(end)) = (vertex_count, header_end) else {
            return Err(IoFormatError::Parse {
                path: path.display().to_string(),
                line: lines.len(),
                message: "PLY header missing 'element vertex' or 'end_header'".into(),
            });
        };
        for (line_no, line) in lines.iter().skip(end + 1).take(count) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            points.push(parse_point(*line_no, &parts)?);
        }
        if points.len() != count {
            return Err(IoFormatError::Parse {
                path: path.display().to_string(),
                line: lines.len(),
                message: format!("expected {count} vertices, file ends after {}", points.len()),
            });
        }
    } else {
        for (line_no, line) in &lines {
            let l = line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = l.split_whitespace().collect();
            points.push(parse_point(*line_no, &parts)?);
        }
    }
    Ok(Scan::new(points, None)?)
}

/// Write a scan as an ASCII `.xyz` point list.
pub fn write_scan(path: &Path, scan: &Scan) -> Result<(), IoFormatError> {
    let mut out = String::new();
    for p in &scan.points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Axis-angle world-to-camera rotation.
    rotation: [f64; 3],
    translation: [f64; 3],
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<(), IoFormatError> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| {
            let aa = crate::body_model::normalize_axis_angle(&rotation_to_axis_angle(&c.rotation));
            CameraRecord {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                rotation: [aa.x, aa.y, aa.z],
                translation: [c.translation.x, c.translation.y, c.translation.z],
            }
        })
        .collect();
    write_json(path, &records)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>, IoFormatError> {
    let records: Vec<CameraRecord> = read_json(path)?;
    records
        .into_iter()
        .map(|r| {
            let rot = crate::body_model::rodrigues(&Vector3::new(r.rotation[0], r.rotation[1], r.rotation[2]));
            Ok(Camera::new(
                r.fx,
                r.fy,
                r.cx,
                r.cy,
                rot,
                Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
            )?)
        })
        .collect()
}

fn rotation_to_axis_angle(r: &nalgebra::Matrix3<f64>) -> Vector3<f64> {
    // Through the quaternion: stable for angles near pi, unlike the direct
    // log map.
    nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r))
        .scaled_axis()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JointsRecord {
    camera: usize,
    /// (x, y, confidence) per joint.
    joints: Vec<[f64; 3]>,
}

pub fn write_joints2d(path: &Path, observations: &[JointObservations]) -> Result<(), IoFormatError> {
    let records: Vec<JointsRecord> = observations
        .iter()
        .enumerate()
        .map(|(i, o)| JointsRecord { camera: i, joints: o.joints.clone() })
        .collect();
    write_json(path, &records)
}

pub fn read_joints2d(path: &Path) -> Result<Vec<JointObservations>, IoFormatError> {
    let mut records: Vec<JointsRecord> = read_json(path)?;
    records.sort_by_key(|r| r.camera);
    Ok(records.into_iter().map(|r| JointObservations { joints: r.joints }).collect())
}

/// Pose vector file: a JSON array of 3K axis-angle components, normalized to
/// angles in [0, pi] on write.
pub fn write_pose(path: &Path, pose: &PoseParams) -> Result<(), IoFormatError> {
    write_json(path, &pose.normalized().0)
}

pub fn read_pose(path: &Path) -> Result<PoseParams, IoFormatError> {
    let values: Vec<f64> = read_json(path)?;
    if values.len() % 3 != 0 {
        return Err(IoFormatError::BadData {
            path: path.display().to_string(),
            message: format!("pose length {} is not a multiple of 3", values.len()),
        });
    }
    Ok(PoseParams(values))
}

// ---------------------------------------------------------------------------
// Displacement prior
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorManifest {
    schema: String,
    resolution: usize,
    labels: Vec<String>,
    /// Per-label displacement map image files, relative to the manifest.
    maps: Vec<String>,
}

/// Serialize a displacement prior as a manifest plus one displacement map
/// per label (validity = seen mask).
pub fn write_prior(
    path: &Path,
    prior: &crate::completion::DisplacementPrior,
    palette: &LabelPalette,
) -> Result<(), IoFormatError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prior");
    let texels = prior.resolution * prior.resolution;
    let mut maps = Vec::new();
    for l in 0..prior.label_count {
        let mut cap = crate::body_model::DEFAULT_OFFSET_CAP;
        for t in 0..texels {
            if prior.seen[l * texels + t] {
                let m = prior.mean[l * texels + t];
                cap = cap.max(m.amax());
            }
        }
        let mut map = DisplacementMap::new(prior.resolution, cap)?;
        for t in 0..texels {
            if prior.seen[l * texels + t] {
                map.encode(t, &prior.mean[l * texels + t]);
                map.valid[t] = true;
            }
        }
        let name = format!("{stem}_label{l}.png");
        write_displacement(&dir.join(&name), &map)?;
        maps.push(name);
    }
    let manifest = PriorManifest {
        schema: PRIOR_SCHEMA.to_string(),
        resolution: prior.resolution,
        labels: palette.names.clone(),
        maps,
    };
    write_json(path, &manifest)
}

pub fn read_prior(path: &Path) -> Result<crate::completion::DisplacementPrior, IoFormatError> {
    let manifest: PriorManifest = read_json(path)?;
    if manifest.schema != PRIOR_SCHEMA {
        return Err(IoFormatError::Schema {
            path: path.display().to_string(),
            expected: PRIOR_SCHEMA.to_string(),
            found: manifest.schema,
        });
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let texels = manifest.resolution * manifest.resolution;
    let label_count = manifest.maps.len();
    let mut mean = vec![Vector3::zeros(); label_count * texels];
    let mut seen = vec![false; label_count * texels];
    for (l, name) in manifest.maps.iter().enumerate() {
        let map = read_displacement(&dir.join(name))?;
        if map.resolution != manifest.resolution {
            return Err(IoFormatError::BadData {
                path: path.display().to_string(),
                message: format!("prior map {name} resolution {} != {}", map.resolution, manifest.resolution),
            });
        }
        for t in 0..texels {
            if map.valid[t] {
                mean[l * texels + t] = map.decode(t);
                seen[l * texels + t] = true;
            }
        }
    }
    Ok(crate::completion::DisplacementPrior {
        resolution: manifest.resolution,
        label_count,
        mean,
        seen,
    })
}

// ---------------------------------------------------------------------------
// Mesh export
// ---------------------------------------------------------------------------

/// Export a textured mesh as Wavefront OBJ with a companion MTL pointing at
/// the texture image. Vertex order is preserved; positions print with six
/// decimals.
pub fn export_obj(
    mesh: &Mesh,
    atlas: &UvAtlas,
    texture_file: &str,
    out_path: &Path,
) -> Result<(), IoFormatError> {
    let stem = out_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("avatar")
        .to_string();
    let mtl_name = format!("{stem}.mtl");

    // Deduplicate per-corner UVs by exact bits.
    let mut uv_index: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut uvs: Vec<Point2<f64>> = Vec::new();
    let mut corner_uv: Vec<[usize; 3]> = Vec::with_capacity(mesh.faces.len());
    for uvs3 in atlas.face_uvs() {
        let mut idx = [0usize; 3];
        for (c, uv) in uvs3.iter().enumerate() {
            let key = (uv.x.to_bits(), uv.y.to_bits());
            let next = uvs.len();
            let entry = uv_index.entry(key).or_insert(next);
            if *entry == next {
                uvs.push(*uv);
            }
            idx[c] = *entry;
        }
        corner_uv.push(idx);
    }

    let file = std::fs::File::create(out_path).map_err(|e| io_err(out_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>, s: String| -> Result<(), IoFormatError> {
        w.write_all(s.as_bytes()).map_err(|e| io_err(out_path, e))
    };
    write(&mut w, format!("mtllib {mtl_name}\no {stem}\n"))?;
    for v in &mesh.vertices {
        write(&mut w, format!("v {:.6} {:.6} {:.6}\n", v.x, v.y, v.z))?;
    }
    for uv in &uvs {
        write(&mut w, format!("vt {:.6} {:.6}\n", uv.x, uv.y))?;
    }
    write(&mut w, "usemtl material0\n".to_string())?;
    for (f, face) in mesh.faces.iter().enumerate() {
        let uv = corner_uv[f];
        write(
            &mut w,
            format!(
                "f {}/{} {}/{} {}/{}\n",
                face[0] + 1,
                uv[0] + 1,
                face[1] + 1,
                uv[1] + 1,
                face[2] + 1,
                uv[2] + 1
            ),
        )?;
    }
    w.flush().map_err(|e| io_err(out_path, e))?;

    let mtl_path = out_path.with_file_name(&mtl_name);
    let mtl = format!("newmtl material0\nKd 1.000000 1.000000 1.000000\nmap_Kd {texture_file}\n");
    std::fs::write(&mtl_path, mtl).map_err(|e| io_err(&mtl_path, e))
}

/// Minimal OBJ reader for round-trip checks: positions, UVs, and faces with
/// position/uv indices.
#[derive(Debug, Clone, Default)]
pub struct ParsedObj {
    pub positions: Vec<Point3<f64>>,
    pub uvs: Vec<Point2<f64>>,
    pub faces: Vec<[(usize, usize); 3]>,
}

pub fn read_obj(path: &Path) -> Result<ParsedObj, IoFormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = ParsedObj::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| IoFormatError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("bad vertex: {e}"),
                    })?;
                if c.len() != 3 {
                    return Err(IoFormatError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: "vertex needs 3 coordinates".into(),
                    });
                }
                out.positions.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("vt") => {
                let c: Vec<f64> = parts
                    .take(2)
                    .map(|p| p.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| IoFormatError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("bad uv: {e}"),
                    })?;
                if c.len() != 2 {
                    return Err(IoFormatError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: "uv needs 2 coordinates".into(),
                    });
                }
                out.uvs.push(Point2::new(c[0], c[1]));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for p in parts {
                    let mut it = p.split('/');
                    let v: usize = it
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|e| IoFormatError::Parse {
                            path: path.display().to_string(),
                            line: line_no,
                            message: format!("bad face index: {e}"),
                        })?;
                    let vt: usize = it
                        .next()
                        .unwrap_or("0")
                        .parse()
                        .unwrap_or(0);
                    corners.push((v - 1, vt.saturating_sub(1)));
                }
                if corners.len() != 3 {
                    return Err(IoFormatError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("only triangles supported, got {} corners", corners.len()),
                    });
                }
                out.faces.push([corners[0], corners[1], corners[2]]);
            }
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_humanoid, HumanoidSpec};
    use nalgebra::Matrix3;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn small_humanoid() -> Humanoid {
        make_humanoid(&HumanoidSpec { ring_segments: 8, length_segments: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn model_descriptor_roundtrip_is_exact() {
        let h = small_humanoid();
        let desc = ModelDescriptor::from_humanoid(&h);
        let dir = tmp();
        let path = dir.path().join("model.json");
        save_model(&path, &desc).unwrap();
        let (desc2, loaded) = load_model(&path).unwrap();
        assert_eq!(desc, desc2);
        assert_eq!(loaded.template.vertices(), h.template.vertices());
        assert_eq!(loaded.template.faces(), h.template.faces());
        assert_eq!(loaded.atlas, h.atlas);
        assert_eq!(loaded.part_map, h.part_map);
    }

    #[test]
    fn model_missing_schema_is_an_error() {
        let h = small_humanoid();
        let mut desc = ModelDescriptor::from_humanoid(&h);
        desc.schema = "model.v0".into();
        let dir = tmp();
        let path = dir.path().join("model.json");
        save_model(&path, &desc).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, IoFormatError::Schema { .. }));
    }

    #[test]
    fn truncated_model_errors_name_the_missing_section() {
        let dir = tmp();
        let path = dir.path().join("model.json");
        std::fs::write(&path, "{\"schema\": \"model.v1\", \"vertices\": []").unwrap();
        let err = load_model(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.json"), "{msg}");
    }

    #[test]
    fn texture_roundtrip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let mut map = TextureMap::new(16);
        for t in 0..256 {
            if rng.gen_bool(0.7) {
                map.pixels[t] = [rng.gen(), rng.gen(), rng.gen()];
                map.valid[t] = true;
            }
        }
        let dir = tmp();
        let path = dir.path().join("tex.png");
        write_texture(&path, &map).unwrap();
        let back = read_texture(&path).unwrap();
        let mut canonical = map.clone();
        canonical.canonicalize();
        assert_eq!(back, canonical);
    }

    #[test]
    fn segmentation_roundtrip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(62);
        let mut map = SegmentationMap::new(16, LabelPalette::default());
        for t in 0..256 {
            if rng.gen_bool(0.6) {
                map.labels[t] = rng.gen_range(0..6);
                map.valid[t] = true;
            }
        }
        let dir = tmp();
        let path = dir.path().join("seg.png");
        write_segmentation(&path, &map).unwrap();
        let back = read_segmentation(&path, &LabelPalette::default()).unwrap();
        let mut canonical = map.clone();
        canonical.canonicalize();
        assert_eq!(back, canonical);
    }

    #[test]
    fn displacement_roundtrip_bit_exact_with_sidecar() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(63);
        let mut map = DisplacementMap::new(8, 0.12).unwrap();
        for t in 0..64 {
            if rng.gen_bool(0.8) {
                map.raw[t] = [rng.gen(), rng.gen(), rng.gen()];
                map.valid[t] = true;
            }
        }
        let dir = tmp();
        let path = dir.path().join("disp.png");
        write_displacement(&path, &map).unwrap();
        let back = read_displacement(&path).unwrap();
        assert_eq!(back.scale, map.scale);
        assert_eq!(back.offset, map.offset);
        for t in 0..64 {
            assert_eq!(back.valid[t], map.valid[t]);
            if map.valid[t] {
                assert_eq!(back.raw[t], map.raw[t]);
            }
        }
    }

    #[test]
    fn displacement_zero_scale_sidecar_rejected() {
        let dir = tmp();
        let path = dir.path().join("disp.png");
        let map = DisplacementMap::new(4, 0.1).unwrap();
        write_displacement(&path, &map).unwrap();
        // Corrupt the sidecar scale.
        let sidecar = path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).unwrap().replace("0.1", "0.0");
        std::fs::write(&sidecar, text).unwrap();
        let err = read_displacement(&path).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }

    #[test]
    fn iuv_roundtrip_preserves_quantized_values() {
        let mut iuv = IuvImage::new(8, 4);
        for i in 0..32 {
            iuv.part[i] = (i % 3) as u8;
            iuv.u[i] = (i as f64) / 32.0;
            iuv.v[i] = 1.0 - (i as f64) / 32.0;
        }
        iuv.quantize();
        let dir = tmp();
        let path = dir.path().join("iuv.png");
        write_iuv(&path, &iuv).unwrap();
        let back = read_iuv(&path).unwrap();
        assert_eq!(back, iuv);
    }

    #[test]
    fn xyz_scan_roundtrip_and_errors() {
        let dir = tmp();
        let path = dir.path().join("scan.xyz");
        std::fs::write(&path, "0 0 0\n1.5 2.5 3.5\n# comment\n-1 -2 -3\n").unwrap();
        let scan = read_scan(&path).unwrap();
        assert_eq!(scan.len(), 3);
        assert_eq!(scan.points[1], Point3::new(1.5, 2.5, 3.5));

        std::fs::write(&path, "0 0 0\n1 nan 3\n").unwrap();
        let err = read_scan(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        std::fs::write(&path, "0 0\n").unwrap();
        let err = read_scan(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn ply_scan_subset_header() {
        let dir = tmp();
        let path = dir.path().join("scan.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n2 2 2\n",
        )
        .unwrap();
        let scan = read_scan(&path).unwrap();
        assert_eq!(scan.len(), 3);
        assert_eq!(scan.points[2], Point3::new(2.0, 2.0, 2.0));

        // Truncated body errors with position info.
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n",
        )
        .unwrap();
        assert!(read_scan(&path).is_err());
    }

    #[test]
    fn camera_roundtrip_preserves_projection() {
        let cams = vec![
            Camera::look_at(&Point3::new(0.0, 1.0, -3.0), &Point3::new(0.0, 0.9, 0.0), 300.0, 300.0, 256, 256),
            Camera::new(500.0, 510.0, 128.0, 127.0, Matrix3::identity(), Vector3::new(0.1, -0.2, 2.0)).unwrap(),
        ];
        let dir = tmp();
        let path = dir.path().join("cameras.json");
        write_cameras(&path, &cams).unwrap();
        let back = read_cameras(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cams.iter().zip(&back) {
            let p = Point3::new(0.2, 1.1, 0.3);
            let (u0, v0) = a.project(&p).unwrap();
            let (u1, v1) = b.project(&p).unwrap();
            assert!((u0 - u1).abs() < 1e-9 && (v0 - v1).abs() < 1e-9);
        }
    }

    #[test]
    fn joints_and_pose_roundtrip() {
        let obs = vec![
            JointObservations { joints: vec![[1.0, 2.0, 1.0], [3.0, 4.0, 0.5]] },
            JointObservations { joints: vec![[5.0, 6.0, 0.0], [7.0, 8.0, 1.0]] },
        ];
        let dir = tmp();
        let path = dir.path().join("joints2d.json");
        write_joints2d(&path, &obs).unwrap();
        let back = read_joints2d(&path).unwrap();
        assert_eq!(back, obs);

        let pose = PoseParams(vec![0.1, -0.2, 0.3, 4.0, 0.0, 0.0]);
        let pose_path = dir.path().join("pose.json");
        write_pose(&pose_path, &pose).unwrap();
        let back = read_pose(&pose_path).unwrap();
        // Serialization normalizes angles into [0, pi]; rotations match.
        for k in 0..2 {
            let r0 = crate::body_model::rodrigues(&pose.joint(k));
            let r1 = crate::body_model::rodrigues(&back.joint(k));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r0[(i, j)] - r1[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn obj_export_single_triangle_and_parse_back() {
        let mesh = Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        let atlas = UvAtlas::new(
            vec![[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)]],
            vec![0],
            1,
        )
        .unwrap();
        let dir = tmp();
        let path = dir.path().join("tri.obj");
        export_obj(&mesh, &atlas, "tex.png", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("vt ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1);
        let parsed = read_obj(&path).unwrap();
        assert_eq!(parsed.positions.len(), 3);
        assert_eq!(parsed.uvs.len(), 3);
        assert_eq!(parsed.faces.len(), 1);
        assert!(std::fs::metadata(dir.path().join("tri.mtl")).is_ok());
    }

    #[test]
    fn obj_positions_match_within_print_precision() {
        let h = small_humanoid();
        let mesh = Mesh::new(h.template.vertices().to_vec(), h.template.faces().to_vec());
        let dir = tmp();
        let path = dir.path().join("avatar.obj");
        export_obj(&mesh, &h.atlas, "texture.png", &path).unwrap();
        let parsed = read_obj(&path).unwrap();
        assert_eq!(parsed.positions.len(), mesh.vertices.len());
        assert_eq!(parsed.faces.len(), mesh.faces.len());
        for (a, b) in parsed.positions.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-6 * 2.0);
        }
        // Vertex order preserved and indices intact.
        for (pf, mf) in parsed.faces.iter().zip(&mesh.faces) {
            assert_eq!([pf[0].0, pf[1].0, pf[2].0], *mf);
        }
    }

    #[test]
    fn weight_map_roundtrip() {
        let weights: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        let dir = tmp();
        let path = dir.path().join("w.png");
        write_weight_map(&path, &weights, 8).unwrap();
        let (back, r) = read_weight_map(&path).unwrap();
        assert_eq!(r, 8);
        for (a, b) in weights.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn prior_roundtrip() {
        let h = small_humanoid();
        let table = crate::uv_atlas::build_texel_table(&h.atlas, &h.template, 64).unwrap();
        let seg = crate::completion::complete_segmentation(&h.reference_segmentation(&table), &table).unwrap();
        let mut disp = DisplacementMap::new(64, 0.15).unwrap();
        for t in 0..64 * 64 {
            disp.encode(t, &Vector3::new(0.01, 0.0, -0.01));
            disp.valid[t] = true;
        }
        let prior = crate::completion::fit_displacement_prior(&[(seg, disp)]).unwrap();
        let dir = tmp();
        let path = dir.path().join("prior.json");
        write_prior(&path, &prior, &LabelPalette::default()).unwrap();
        let back = read_prior(&path).unwrap();
        assert_eq!(back.resolution, prior.resolution);
        assert_eq!(back.label_count, prior.label_count);
        assert_eq!(back.seen, prior.seen);
        let step = 2.0 * 0.15 / 65534.0;
        for i in 0..prior.mean.len() {
            if prior.seen[i] {
                assert!((back.mean[i] - prior.mean[i]).norm() < 3.0 * step);
            }
        }
    }
}
