//! Parametric body mesh: linear blend skinning over a kinematic tree, shape
//! blendshapes, optional pose-dependent blendshapes, and additive per-vertex
//! offsets in template space for clothing and hair geometry.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyModelError {
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("skin weight row {row} sums to {sum}, expected 1 within 1e-9")]
    BadWeightRow { row: usize, sum: f64 },
    #[error("negative entry in {field} at row {row}")]
    NegativeEntry { field: &'static str, row: usize },
    #[error("joint regressor row {row} sums to {sum}, expected 1 within 1e-9")]
    BadRegressorRow { row: usize, sum: f64 },
    #[error("parents[{joint}] = {parent} does not precede its child (tree must be topologically ordered)")]
    BadParent { joint: usize, parent: usize },
    #[error("parents[0] must be the root (none)")]
    BadRoot,
    #[error("face {face} references vertex {vertex}, but the template has {count} vertices")]
    FaceOutOfRange { face: usize, vertex: usize, count: usize },
    #[error("symmetry pairing is not an involution at vertex {vertex}")]
    BadSymmetry { vertex: usize },
    #[error("offset magnitude {magnitude} at vertex {vertex} exceeds the cap {cap}")]
    OffsetTooLarge { vertex: usize, magnitude: f64, cap: f64 },
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
    #[error("skinning produced non-finite output (degenerate inputs)")]
    NonFiniteOutput,
}

/// Default cap on per-vertex clothing offsets, meters.
pub const DEFAULT_OFFSET_CAP: f64 = 0.15;

/// Axis-angle pose, one 3-vector per joint; element 0 is the global root
/// rotation. Serializers normalize each axis-angle to angle in [0, pi] on
/// write; in memory any finite magnitude is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams(pub Vec<f64>);

impl PoseParams {
    pub fn zeros(joint_count: usize) -> Self {
        Self(vec![0.0; 3 * joint_count])
    }

    pub fn joint_count(&self) -> usize {
        self.0.len() / 3
    }

    pub fn joint(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * k], self.0[3 * k + 1], self.0[3 * k + 2])
    }

    pub fn set_joint(&mut self, k: usize, v: Vector3<f64>) {
        self.0[3 * k] = v.x;
        self.0[3 * k + 1] = v.y;
        self.0[3 * k + 2] = v.z;
    }

    /// Canonical form for serialization: angle folded into [0, pi] by
    /// flipping the axis when needed.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for k in 0..self.joint_count() {
            out.set_joint(k, normalize_axis_angle(&self.joint(k)));
        }
        out
    }
}

pub fn normalize_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    let angle = v.norm();
    if angle == 0.0 {
        return *v;
    }
    let axis = v / angle;
    let mut a = angle % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a = 2.0 * std::f64::consts::PI - a;
        return axis * -a;
    }
    axis * a
}

/// Shape coefficients, dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams(pub Vec<f64>);

impl ShapeParams {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// Per-vertex displacements in template (rest-pose) space, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub offsets: Vec<Vector3<f64>>,
    pub cap: f64,
}

impl OffsetField {
    pub fn new(offsets: Vec<Vector3<f64>>, cap: f64) -> Result<Self, BodyModelError> {
        for (i, o) in offsets.iter().enumerate() {
            if !o.iter().all(|c| c.is_finite()) {
                return Err(BodyModelError::NonFinite { field: "offsets" });
            }
            let m = o.norm();
            if m > cap {
                return Err(BodyModelError::OffsetTooLarge { vertex: i, magnitude: m, cap });
            }
        }
        Ok(Self { offsets, cap })
    }

    pub fn zeros(vertex_count: usize) -> Self {
        Self {
            offsets: vec![Vector3::zeros(); vertex_count],
            cap: DEFAULT_OFFSET_CAP,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn max_component(&self) -> f64 {
        self.offsets
            .iter()
            .flat_map(|o| o.iter().map(|c| c.abs()))
            .fold(0.0, f64::max)
    }
}

/// One shape (or pose) blendshape component: a displacement per vertex.
pub type DisplacementField = Vec<Vector3<f64>>;

/// Optional pose blendshapes: one displacement field per entry of
/// vec(R_k - I) over the non-root joints, i.e. 9*(K-1) fields.
#[derive(Debug, Clone)]
pub struct PoseBasis {
    pub fields: Vec<DisplacementField>,
}

/// Rest-pose mesh, skinning weights, joint regressor, blendshape bases and
/// the kinematic tree. Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct BodyTemplate {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Per-vertex sparse weights (joint, weight), each row summing to 1.
    skin_weights: Vec<Vec<(usize, f64)>>,
    /// Per-joint sparse regressor rows (vertex, weight), each summing to 1.
    joint_regressor: Vec<Vec<(usize, f64)>>,
    parents: Vec<Option<usize>>,
    shape_basis: Vec<DisplacementField>,
    pose_basis: Option<PoseBasis>,
    /// Full symmetry permutation (involution); identity entries are on-plane.
    symmetry: Vec<usize>,
}

impl BodyTemplate {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        skin_weights: Vec<Vec<(usize, f64)>>,
        joint_regressor: Vec<Vec<(usize, f64)>>,
        parents: Vec<Option<usize>>,
        shape_basis: Vec<DisplacementField>,
        pose_basis: Option<PoseBasis>,
        symmetry_pairs: Vec<(usize, usize)>,
    ) -> Result<Self, BodyModelError> {
        let n = vertices.len();
        let k = parents.len();

        if skin_weights.len() != n {
            return Err(BodyModelError::DimensionMismatch {
                field: "skin_weights",
                expected: n,
                got: skin_weights.len(),
            });
        }
        for (row, entries) in skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in entries {
                if j >= k {
                    return Err(BodyModelError::DimensionMismatch {
                        field: "skin_weights joint index",
                        expected: k,
                        got: j,
                    });
                }
                if w < 0.0 {
                    return Err(BodyModelError::NegativeEntry { field: "skin_weights", row });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(BodyModelError::BadWeightRow { row, sum });
            }
        }

        if joint_regressor.len() != k {
            return Err(BodyModelError::DimensionMismatch {
                field: "joint_regressor",
                expected: k,
                got: joint_regressor.len(),
            });
        }
        for (row, entries) in joint_regressor.iter().enumerate() {
            let mut sum = 0.0;
            for &(v, w) in entries {
                if v >= n {
                    return Err(BodyModelError::DimensionMismatch {
                        field: "joint_regressor vertex index",
                        expected: n,
                        got: v,
                    });
                }
                if w < 0.0 {
                    return Err(BodyModelError::NegativeEntry { field: "joint_regressor", row });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(BodyModelError::BadRegressorRow { row, sum });
            }
        }

        if k > 0 && parents[0].is_some() {
            return Err(BodyModelError::BadRoot);
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => return Err(BodyModelError::BadParent { joint: j, parent: usize::MAX }),
                Some(p) if *p >= j => {
                    return Err(BodyModelError::BadParent { joint: j, parent: *p })
                }
                _ => {}
            }
        }

        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(BodyModelError::FaceOutOfRange { face: fi, vertex: v, count: n });
                }
            }
        }

        for basis in &shape_basis {
            if basis.len() != n {
                return Err(BodyModelError::DimensionMismatch {
                    field: "shape_basis",
                    expected: n,
                    got: basis.len(),
                });
            }
        }
        if let Some(pb) = &pose_basis {
            if pb.fields.len() != 9 * k.saturating_sub(1) {
                return Err(BodyModelError::DimensionMismatch {
                    field: "pose_basis",
                    expected: 9 * k.saturating_sub(1),
                    got: pb.fields.len(),
                });
            }
            for field in &pb.fields {
                if field.len() != n {
                    return Err(BodyModelError::DimensionMismatch {
                        field: "pose_basis field",
                        expected: n,
                        got: field.len(),
                    });
                }
            }
        }

        let mut symmetry: Vec<usize> = (0..n).collect();
        for &(a, b) in &symmetry_pairs {
            if a >= n || b >= n {
                return Err(BodyModelError::BadSymmetry { vertex: a.max(b) });
            }
            symmetry[a] = b;
            symmetry[b] = a;
        }
        for v in 0..n {
            if symmetry[symmetry[v]] != v {
                return Err(BodyModelError::BadSymmetry { vertex: v });
            }
        }

        Ok(Self {
            vertices,
            faces,
            skin_weights,
            joint_regressor,
            parents,
            shape_basis,
            pose_basis,
            symmetry,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn skin_weights(&self) -> &[Vec<(usize, f64)>] {
        &self.skin_weights
    }

    pub fn joint_regressor(&self) -> &[Vec<(usize, f64)>] {
        &self.joint_regressor
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn shape_basis(&self) -> &[DisplacementField] {
        &self.shape_basis
    }

    pub fn pose_basis(&self) -> Option<&PoseBasis> {
        self.pose_basis.as_ref()
    }

    /// The symmetry involution as a full permutation (identity off the pairs).
    pub fn symmetry(&self) -> &[usize] {
        &self.symmetry
    }

    pub fn symmetry_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for v in 0..self.symmetry.len() {
            if self.symmetry[v] > v {
                pairs.push((v, self.symmetry[v]));
            }
        }
        pairs
    }

    fn check_params(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
        offsets: &OffsetField,
    ) -> Result<(), BodyModelError> {
        if pose.0.len() != 3 * self.joint_count() {
            return Err(BodyModelError::DimensionMismatch {
                field: "pose",
                expected: 3 * self.joint_count(),
                got: pose.0.len(),
            });
        }
        if shape.0.len() != self.shape_dim() {
            return Err(BodyModelError::DimensionMismatch {
                field: "shape",
                expected: self.shape_dim(),
                got: shape.0.len(),
            });
        }
        if offsets.len() != self.vertex_count() {
            return Err(BodyModelError::DimensionMismatch {
                field: "offsets",
                expected: self.vertex_count(),
                got: offsets.len(),
            });
        }
        if !pose.0.iter().all(|v| v.is_finite()) {
            return Err(BodyModelError::NonFinite { field: "pose" });
        }
        if !shape.0.iter().all(|v| v.is_finite()) {
            return Err(BodyModelError::NonFinite { field: "shape" });
        }
        Ok(())
    }

    /// Unposed morph: template + shape blendshapes + pose blendshapes +
    /// clothing offsets.
    pub fn morph(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
        offsets: &OffsetField,
    ) -> Result<Vec<Point3<f64>>, BodyModelError> {
        self.check_params(pose, shape, offsets)?;
        let mut out = self.vertices.clone();
        for (s, field) in self.shape_basis.iter().enumerate() {
            let c = shape.0[s];
            if c != 0.0 {
                for (v, d) in field.iter().enumerate() {
                    out[v] += d * c;
                }
            }
        }
        if let Some(pb) = &self.pose_basis {
            let feature = pose_feature(pose);
            for (i, c) in feature.iter().enumerate() {
                if *c != 0.0 {
                    for (v, d) in pb.fields[i].iter().enumerate() {
                        out[v] += d * *c;
                    }
                }
            }
        }
        for (v, o) in offsets.offsets.iter().enumerate() {
            out[v] += o;
        }
        Ok(out)
    }

    /// Rest-pose joint locations for a given shape: regressor applied to the
    /// shaped (but unposed, offset-free) vertices.
    pub fn joints(&self, shape: &ShapeParams) -> Result<Vec<Point3<f64>>, BodyModelError> {
        let shaped = self.morph(
            &PoseParams::zeros(self.joint_count()),
            shape,
            &OffsetField::zeros(self.vertex_count()),
        )?;
        Ok(self
            .joint_regressor
            .iter()
            .map(|row| {
                let mut p = Vector3::zeros();
                for &(v, w) in row {
                    p += shaped[v].coords * w;
                }
                Point3::from(p)
            })
            .collect())
    }

    /// Forward kinematics: per-joint world transforms and the vertex
    /// transforms used by linear blend skinning. Rotations pivot about the
    /// rest-pose joints of the shaped body.
    pub fn forward_kinematics(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
    ) -> Result<Fk, BodyModelError> {
        let rest_joints = self.joints(shape)?;
        Ok(fk_from_rest_joints(&rest_joints, &self.parents, pose))
    }

    /// Pose the morphed body with linear blend skinning.
    pub fn skin(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
        offsets: &OffsetField,
    ) -> Result<crate::mesh::Mesh, BodyModelError> {
        let morphed = self.morph(pose, shape, offsets)?;
        let fk = self.forward_kinematics(pose, shape)?;
        let mut posed = Vec::with_capacity(morphed.len());
        for (v, p) in morphed.iter().enumerate() {
            let mut q = Vector3::zeros();
            let h = p.coords.push(1.0);
            for &(j, w) in &self.skin_weights[v] {
                let t = fk.vertex_transforms[j] * h;
                q += Vector3::new(t.x, t.y, t.z) * w;
            }
            if !q.iter().all(|c| c.is_finite()) {
                return Err(BodyModelError::NonFiniteOutput);
            }
            posed.push(Point3::from(q));
        }
        Ok(crate::mesh::Mesh::new(posed, self.faces.clone()))
    }

    /// Posed joint positions under forward kinematics.
    pub fn posed_joints(
        &self,
        pose: &PoseParams,
        shape: &ShapeParams,
    ) -> Result<Vec<Point3<f64>>, BodyModelError> {
        Ok(self.forward_kinematics(pose, shape)?.joint_positions)
    }
}

/// Forward-kinematics products for one (pose, shape) evaluation.
#[derive(Debug, Clone)]
pub struct Fk {
    /// World transform per joint (maps the joint's rest frame at the origin).
    pub joint_transforms: Vec<Matrix4<f64>>,
    /// Vertex transform per joint: world transform with the rest joint
    /// position removed, i.e. G_k * T(-j_k).
    pub vertex_transforms: Vec<Matrix4<f64>>,
    /// Posed joint positions.
    pub joint_positions: Vec<Point3<f64>>,
    /// Rest joint positions the transforms pivot about.
    pub rest_joints: Vec<Point3<f64>>,
}

/// FK over an explicit rest skeleton; shared by skinning and the fitting
/// Jacobians.
pub fn fk_from_rest_joints(
    rest_joints: &[Point3<f64>],
    parents: &[Option<usize>],
    pose: &PoseParams,
) -> Fk {
    let k = parents.len();
    let mut joint_transforms = vec![Matrix4::identity(); k];
    let mut vertex_transforms = vec![Matrix4::identity(); k];
    let mut joint_positions = vec![Point3::origin(); k];
    for j in 0..k {
        let rot = rodrigues(&pose.joint(j));
        let offset = match parents[j] {
            None => rest_joints[j].coords,
            Some(p) => rest_joints[j] - rest_joints[p],
        };
        let local = rigid(&rot, &offset);
        joint_transforms[j] = match parents[j] {
            None => local,
            Some(p) => joint_transforms[p] * local,
        };
        let t = joint_transforms[j];
        joint_positions[j] = Point3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]);
        vertex_transforms[j] = t * translation(&(-rest_joints[j].coords));
    }
    Fk {
        joint_transforms,
        vertex_transforms,
        joint_positions,
        rest_joints: rest_joints.to_vec(),
    }
}

pub fn rigid(rot: &Matrix3<f64>, offset: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(offset);
    m
}

pub fn translation(offset: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(offset);
    m
}

/// Axis-angle to rotation matrix. The zero vector maps to the identity.
pub fn rodrigues(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let angle = axis_angle.norm();
    if angle < 1e-12 {
        // Second-order expansion keeps the result orthonormal to machine
        // precision for tiny angles.
        let k = skew(axis_angle);
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let axis = axis_angle / angle;
    let k = skew(&axis);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pose feature for pose blendshapes: vec(R_k - I) over non-root joints,
/// row-major, length 9*(K-1).
pub fn pose_feature(pose: &PoseParams) -> Vec<f64> {
    let k = pose.joint_count();
    let mut feature = Vec::with_capacity(9 * k.saturating_sub(1));
    for j in 1..k {
        let r = rodrigues(&pose.joint(j)) - Matrix3::identity();
        for row in 0..3 {
            for col in 0..3 {
                feature.push(r[(row, col)]);
            }
        }
    }
    feature
}
