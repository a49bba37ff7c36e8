//! UV-space avatar toolkit.
//!
//! Everything revolves around a parametric body template and the UV atlas of
//! its surface: the crate fits the template to observations, remaps image
//! evidence into partial UV texture/segmentation maps, completes those maps
//! with deterministic baselines behind pluggable interfaces, predicts
//! clothing geometry as displacement maps, and exports posed, textured
//! meshes.
//!
//! Module map:
//! - [`body_model`]: template, blendshapes, linear blend skinning.
//! - [`mesh`]: triangle meshes, BVH queries, ray casting.
//! - [`uv_atlas`]: texel tables, map images, extraction, displacement baking.
//! - [`registration`]: pose/shape fitting and non-rigid scan registration.
//! - [`seg_stitch`]: multi-view label fusion via graph cuts.
//! - [`completion`]: deterministic map completion and editing.
//! - [`metrics`]: L1 / SSIM / MS-SSIM / DSSIM / perceptual distances.
//! - [`synth`]: procedural humanoids, textures, scans, and a ray-cast
//!   renderer for building self-contained test corpora.
//! - [`io_formats`]: model descriptors, map images, scans, cameras, meshes.

pub mod body_model;
pub mod completion;
pub mod io_formats;
pub mod mesh;
pub mod metrics;
pub mod registration;
pub mod seg_stitch;
pub mod synth;
pub mod uv_atlas;

pub use body_model::{BodyTemplate, OffsetField, PoseParams, ShapeParams};
pub use mesh::Mesh;
pub use registration::Camera;
