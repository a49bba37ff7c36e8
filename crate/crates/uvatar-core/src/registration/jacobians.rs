//! Analytic derivatives of forward kinematics and skinned vertices with
//! respect to pose (axis-angle) and shape coefficients. These feed the
//! Gauss-Newton solvers; finite differences are only a fallback.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};

use crate::body_model::{
    fk_from_rest_joints, rigid, rodrigues, skew, translation, BodyTemplate, Fk, PoseParams,
    ShapeParams,
};
use crate::registration::RegistrationError;

/// Derivative of the rotation matrix with respect to one axis-angle
/// component (Gallego-Yezzi closed form; the zero-angle limit is the basis
/// skew matrix).
pub fn rotation_derivative(omega: &Vector3<f64>, component: usize) -> Matrix3<f64> {
    let angle2 = omega.norm_squared();
    let mut e = Vector3::zeros();
    e[component] = 1.0;
    if angle2 < 1e-16 {
        return skew(&e);
    }
    let r = rodrigues(omega);
    let term = omega[component] * skew(omega) + skew(&omega.cross(&((Matrix3::identity() - r) * e)));
    term * r / angle2
}

/// Forward kinematics with derivatives of every joint transform, posed
/// joint, and skinned vertex with respect to the stacked parameter vector
/// [pose; shape].
pub struct FkJacobians {
    pub joint_count: usize,
    pub shape_dim: usize,
    pub fk: Fk,
    /// Morphed (unposed) vertices without clothing offsets.
    pub morphed: Vec<Point3<f64>>,
    /// d vertex_transforms[k] / d param, K x (3K + S).
    da_dparam: Vec<Vec<Matrix4<f64>>>,
    /// d posed joint k / d param.
    djoint_dparam: Vec<Vec<Vector3<f64>>>,
    /// Pose-basis morph derivative per vertex and pose parameter, when the
    /// template carries pose blendshapes.
    dmorph_dpose: Option<Vec<Vec<Vector3<f64>>>>,
}

impl FkJacobians {
    pub fn param_count(&self) -> usize {
        3 * self.joint_count + self.shape_dim
    }

    pub fn compute(
        template: &BodyTemplate,
        pose: &PoseParams,
        shape: &ShapeParams,
    ) -> Result<Self, RegistrationError> {
        let k = template.joint_count();
        let s = template.shape_dim();
        let np = 3 * k + s;

        // Rest joints and their shape derivatives. Joints regress the shaped
        // (pose- and offset-free) vertices, so d j / d beta_s is the
        // regressor applied to the shape basis.
        let rest_joints = template.joints(shape)?;
        let mut djoint_rest_dshape = vec![vec![Vector3::zeros(); s]; k];
        for (j, row) in template.joint_regressor().iter().enumerate() {
            for (si, field) in template.shape_basis().iter().enumerate() {
                let mut d = Vector3::zeros();
                for &(v, w) in row {
                    d += field[v] * w;
                }
                djoint_rest_dshape[j][si] = d;
            }
        }

        let fk = fk_from_rest_joints(&rest_joints, template.parents(), pose);

        // Local transforms and their derivatives.
        let mut dg: Vec<Vec<Matrix4<f64>>> = vec![vec![Matrix4::zeros(); np]; k];
        let mut da: Vec<Vec<Matrix4<f64>>> = vec![vec![Matrix4::zeros(); np]; k];
        let mut g: Vec<Matrix4<f64>> = vec![Matrix4::identity(); k];
        for j in 0..k {
            let omega = pose.joint(j);
            let rot = rodrigues(&omega);
            let parent = template.parents()[j];
            let offset = match parent {
                None => rest_joints[j].coords,
                Some(p) => rest_joints[j] - rest_joints[p],
            };
            let local = rigid(&rot, &offset);
            let (g_parent, dg_parent): (Matrix4<f64>, Option<usize>) = match parent {
                None => (Matrix4::identity(), None),
                Some(p) => (g[p], Some(p)),
            };
            g[j] = g_parent * local;

            for param in 0..np {
                // d local / d param
                let mut dlocal = Matrix4::zeros();
                if param < 3 * k {
                    let joint_of_param = param / 3;
                    if joint_of_param == j {
                        let dr = rotation_derivative(&omega, param % 3);
                        dlocal.fixed_view_mut::<3, 3>(0, 0).copy_from(&dr);
                    }
                } else {
                    let si = param - 3 * k;
                    let doffset = match parent {
                        None => djoint_rest_dshape[j][si],
                        Some(p) => djoint_rest_dshape[j][si] - djoint_rest_dshape[p][si],
                    };
                    dlocal.fixed_view_mut::<3, 1>(0, 3).copy_from(&doffset);
                }
                let parent_term = match dg_parent {
                    None => Matrix4::zeros(),
                    Some(p) => dg[p][param] * local,
                };
                dg[j][param] = parent_term + g_parent * dlocal;
            }

            // Vertex transform A_j = G_j * T(-j_j).
            let t_neg = translation(&(-rest_joints[j].coords));
            for param in 0..np {
                let mut d = dg[j][param] * t_neg;
                if param >= 3 * k {
                    let si = param - 3 * k;
                    let mut dt = Matrix4::zeros();
                    dt.fixed_view_mut::<3, 1>(0, 3)
                        .copy_from(&(-djoint_rest_dshape[j][si]));
                    d += g[j] * dt;
                }
                da[j][param] = d;
            }
        }

        let mut djoint = vec![vec![Vector3::zeros(); np]; k];
        for j in 0..k {
            for param in 0..np {
                djoint[j][param] = Vector3::new(
                    dg[j][param][(0, 3)],
                    dg[j][param][(1, 3)],
                    dg[j][param][(2, 3)],
                );
            }
        }

        let morphed = template.morph(
            pose,
            shape,
            &crate::body_model::OffsetField::zeros(template.vertex_count()),
        )?;

        // Pose blendshapes make the morph itself pose dependent.
        let dmorph_dpose = template.pose_basis().map(|pb| {
            let n = template.vertex_count();
            let mut out = vec![vec![Vector3::zeros(); 3 * k]; n];
            for a in 1..k {
                let omega = pose.joint(a);
                let dr: [Matrix3<f64>; 3] = [
                    rotation_derivative(&omega, 0),
                    rotation_derivative(&omega, 1),
                    rotation_derivative(&omega, 2),
                ];
                for comp in 0..9 {
                    let e = 9 * (a - 1) + comp;
                    let field = &pb.fields[e];
                    let (row, col) = (comp / 3, comp % 3);
                    for i in 0..3 {
                        let coeff = dr[i][(row, col)];
                        if coeff == 0.0 {
                            continue;
                        }
                        let param = 3 * a + i;
                        for v in 0..n {
                            out[v][param] += field[v] * coeff;
                        }
                    }
                }
            }
            out
        });

        Ok(Self {
            joint_count: k,
            shape_dim: s,
            fk,
            morphed,
            da_dparam: da,
            djoint_dparam: djoint,
            dmorph_dpose,
        })
    }

    /// Posed joint position.
    pub fn joint_position(&self, joint: usize) -> Point3<f64> {
        self.fk.joint_positions[joint]
    }

    /// d (posed joint) / d param.
    pub fn joint_jacobian(&self, joint: usize, param: usize) -> Vector3<f64> {
        self.djoint_dparam[joint][param]
    }

    /// Skinned model vertex M_i(pose, shape) without clothing offsets.
    pub fn model_vertex(&self, template: &BodyTemplate, vertex: usize) -> Point3<f64> {
        let h = self.morphed[vertex].coords.push(1.0);
        let mut q = Vector3::zeros();
        for &(j, w) in &template.skin_weights()[vertex] {
            let t = self.fk.vertex_transforms[j] * h;
            q += Vector3::new(t.x, t.y, t.z) * w;
        }
        Point3::from(q)
    }

    /// d M_i / d param.
    pub fn model_vertex_jacobian(
        &self,
        template: &BodyTemplate,
        vertex: usize,
        param: usize,
    ) -> Vector3<f64> {
        let h = self.morphed[vertex].coords.push(1.0);
        let mut out = Vector3::zeros();
        for &(j, w) in &template.skin_weights()[vertex] {
            let t = self.da_dparam[j][param] * h;
            out += Vector3::new(t.x, t.y, t.z) * w;
        }
        // Morph derivative routed through the vertex transform.
        let dmorph = if param >= 3 * self.joint_count {
            let si = param - 3 * self.joint_count;
            Some(template.shape_basis()[si][vertex])
        } else {
            self.dmorph_dpose.as_ref().map(|dm| dm[vertex][param])
        };
        if let Some(d) = dmorph {
            if d != Vector3::zeros() {
                let hd = Vector4::new(d.x, d.y, d.z, 0.0);
                for &(j, w) in &template.skin_weights()[vertex] {
                    let t = self.fk.vertex_transforms[j] * hd;
                    out += Vector3::new(t.x, t.y, t.z) * w;
                }
            }
        }
        out
    }
}
