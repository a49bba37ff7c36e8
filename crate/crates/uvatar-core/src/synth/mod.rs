//! Desk-scale data generation: procedural humanoid templates with UV
//! atlases, reference textures and segmentations, surface-sampled scans, and
//! a ray-cast renderer emitting color + IUV + depth images.

mod humanoid;
mod render;
mod texture;

pub use humanoid::{make_humanoid, Humanoid, LimbDef, LimbKind};
pub use render::{render, RenderOutput};
pub use texture::{procedural_texture, TextureStyle};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::body_model::{BodyTemplate, OffsetField, PoseParams, ShapeParams};
use crate::mesh::Mesh;
use crate::registration::{Camera, RegistrationError, Scan};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid humanoid spec: {reason}")]
    BadSpec { reason: String },
    #[error(transparent)]
    BodyModel(#[from] crate::body_model::BodyModelError),
    #[error(transparent)]
    Atlas(#[from] crate::uv_atlas::AtlasError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

/// Parameters of the procedural humanoid.
///
/// `joint_count` selects the rig: 16 is the full biped, 2 is a single tube
/// over a two-joint chain for hand-checkable kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanoidSpec {
    pub joint_count: usize,
    /// Ring segments per tube (even, at least 8).
    pub ring_segments: usize,
    /// Length segments per tube (at least 4).
    pub length_segments: usize,
    /// Global size multiplier, 1.0 is a ~1.8 m figure.
    pub scale: f64,
    pub seed: u64,
}

impl Default for HumanoidSpec {
    fn default() -> Self {
        Self { joint_count: 16, ring_segments: 16, length_segments: 8, scale: 1.0, seed: 0 }
    }
}

/// Sample a scan from the posed surface: area-weighted face selection,
/// uniform barycentric placement, isotropic Gaussian noise.
pub fn synth_scan(
    template: &BodyTemplate,
    pose: &PoseParams,
    shape: &ShapeParams,
    offsets: &OffsetField,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scan, SynthError> {
    let mesh = template.skin(pose, shape, offsets)?;
    Ok(sample_mesh(&mesh, n_points, noise_sigma, seed)?)
}

/// Area-weighted surface sampling of an arbitrary mesh.
pub fn sample_mesh(
    mesh: &Mesh,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scan, RegistrationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let pick = rng.gen_range(0.0..total);
        let face = cumulative.partition_point(|&c| c < pick).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.face_points(face);
        let mut u: f64 = rng.gen();
        let mut v: f64 = rng.gen();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = a.coords * (1.0 - u - v) + b.coords * u + c.coords * v;
        let noise = if noise_sigma > 0.0 {
            Vector3::new(
                noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                noise_sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
            )
        } else {
            Vector3::zeros()
        };
        points.push(Point3::from(p + noise));
        normals.push(mesh.face_normal(face));
    }
    Scan::new(points, Some(normals))
}

/// Cameras evenly spaced on a horizontal ring looking at the body center.
/// With no yaw range the ring covers the full circle (n=8 gives 45 degree
/// spacing, n=20 gives 18); a range restricts the arc, endpoints included.
pub fn camera_ring(
    n: usize,
    radius: f64,
    center_height: f64,
    yaw_range: Option<(f64, f64)>,
    focal: f64,
    width: usize,
    height: usize,
) -> Vec<Camera> {
    let target = Point3::new(0.0, center_height, 0.0);
    (0..n)
        .map(|i| {
            let yaw = match yaw_range {
                None => 2.0 * std::f64::consts::PI * i as f64 / n as f64,
                Some((a, b)) => {
                    if n == 1 {
                        (a + b) / 2.0
                    } else {
                        a + (b - a) * i as f64 / (n - 1) as f64
                    }
                }
            };
            let eye = Point3::new(
                target.x + radius * yaw.sin(),
                center_height,
                target.z - radius * yaw.cos(),
            );
            Camera::look_at(&eye, &target, focal, focal, width, height)
        })
        .collect()
}
