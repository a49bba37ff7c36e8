//! Pose and shape estimation from multi-view 2D joint detections by damped
//! Gauss-Newton on the reprojection objective with Mahalanobis priors.

use nalgebra::{DMatrix, DVector, Point3};

use crate::body_model::{BodyTemplate, PoseParams, ShapeParams};
use crate::registration::jacobians::FkJacobians;
use crate::registration::{Camera, GaussianPrior, RegistrationError};

/// Per-camera joint detections: one (x, y, confidence) row per joint.
/// Confidence zero excludes the joint from the residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObservations {
    pub joints: Vec<[f64; 3]>,
}

/// Result of [`fit_pose_shape`].
#[derive(Debug, Clone)]
pub struct PoseShapeFit {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub final_cost: f64,
    /// Unweighted RMS reprojection error (pixels) over observed joints.
    pub reprojection_rmse: f64,
    /// False when the iteration budget ran out before convergence.
    pub converged: bool,
    /// True when two or more cameras all share one viewing direction.
    pub degenerate_cameras: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 150;
const MAX_REJECTS: usize = 12;

struct Problem<'a> {
    template: &'a BodyTemplate,
    observations: &'a [JointObservations],
    cameras: &'a [Camera],
    pose_prior: &'a GaussianPrior,
    shape_prior: &'a GaussianPrior,
    lambda_pose: f64,
    lambda_shape: f64,
}

impl Problem<'_> {
    fn split(&self, x: &DVector<f64>) -> (PoseParams, ShapeParams) {
        let k3 = 3 * self.template.joint_count();
        let pose = PoseParams(x.as_slice()[..k3].to_vec());
        let shape = ShapeParams(x.as_slice()[k3..].to_vec());
        (pose, shape)
    }

    /// Residual vector and (optionally) its Jacobian at x.
    fn assemble(
        &self,
        x: &DVector<f64>,
        with_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>, f64, usize), RegistrationError> {
        let (pose, shape) = self.split(x);
        let np = x.len();
        let jac = FkJacobians::compute(self.template, &pose, &shape)?;
        let mut rows: Vec<f64> = Vec::new();
        let mut jrows: Vec<f64> = Vec::new();
        let mut sq_px = 0.0;
        let mut observed = 0usize;

        for (cam, obs) in self.cameras.iter().zip(self.observations) {
            for (k, joint) in obs.joints.iter().enumerate() {
                let conf = joint[2];
                if conf <= 0.0 {
                    continue;
                }
                let p = jac.joint_position(k);
                let Some((u, v)) = cam.project(&p) else {
                    continue; // behind the camera: excluded
                };
                let w = conf.sqrt();
                rows.push(w * (u - joint[0]));
                rows.push(w * (v - joint[1]));
                sq_px += (u - joint[0]).powi(2) + (v - joint[1]).powi(2);
                observed += 1;
                if with_jacobian {
                    // d(u,v)/d p_cam, then chain through the rigid transform
                    // and the joint Jacobian. Two full rows, u then v.
                    let c = cam.to_camera(&p);
                    let iz = 1.0 / c.z;
                    let base = jrows.len();
                    jrows.resize(base + 2 * np, 0.0);
                    for param in 0..np {
                        let dp = cam.rotation * jac.joint_jacobian(k, param);
                        let du = cam.fx * (dp.x * iz - c.x * dp.z * iz * iz);
                        let dv = cam.fy * (dp.y * iz - c.y * dp.z * iz * iz);
                        jrows[base + param] = w * du;
                        jrows[base + np + param] = w * dv;
                    }
                }
            }
        }

        // Whitened prior residuals.
        let k3 = 3 * self.template.joint_count();
        let sp = self.lambda_pose.sqrt();
        let pose_vec = DVector::from_column_slice(&x.as_slice()[..k3]);
        let pose_res = self.pose_prior.sqrt_precision() * (&pose_vec - self.pose_prior.mean()) * sp;
        let ss = self.lambda_shape.sqrt();
        let shape_vec = DVector::from_column_slice(&x.as_slice()[k3..]);
        let shape_res = self.shape_prior.sqrt_precision() * (&shape_vec - self.shape_prior.mean()) * ss;

        let data_rows = rows.len();
        let total_rows = data_rows + k3 + shape_res.len();
        let mut residuals = DVector::zeros(total_rows);
        residuals.rows_mut(0, data_rows).copy_from_slice(&rows);
        residuals.rows_mut(data_rows, k3).copy_from(&pose_res);
        residuals
            .rows_mut(data_rows + k3, shape_res.len())
            .copy_from(&shape_res);

        let jacobian = if with_jacobian {
            let mut j = DMatrix::zeros(total_rows, np);
            for r in 0..data_rows {
                for c in 0..np {
                    j[(r, c)] = jrows[r * np + c];
                }
            }
            let jp = self.pose_prior.sqrt_precision() * sp;
            j.view_mut((data_rows, 0), (k3, k3)).copy_from(&jp);
            let js = self.shape_prior.sqrt_precision() * ss;
            j.view_mut((data_rows + k3, k3), (shape_res.len(), shape_res.len()))
                .copy_from(&js);
            Some(j)
        } else {
            None
        };

        let rmse = if observed > 0 { (sq_px / observed as f64).sqrt() } else { 0.0 };
        Ok((residuals, jacobian, rmse, observed))
    }
}

fn check_dimensions(p: &Problem) -> Result<(), RegistrationError> {
    let k = p.template.joint_count();
    if p.observations.len() != p.cameras.len() {
        return Err(RegistrationError::DimensionMismatch {
            field: "observations vs cameras",
            expected: p.cameras.len(),
            got: p.observations.len(),
        });
    }
    for obs in p.observations {
        if obs.joints.len() != k {
            return Err(RegistrationError::DimensionMismatch {
                field: "joint observations",
                expected: k,
                got: obs.joints.len(),
            });
        }
    }
    if p.pose_prior.dim() != 3 * k {
        return Err(RegistrationError::DimensionMismatch {
            field: "pose prior",
            expected: 3 * k,
            got: p.pose_prior.dim(),
        });
    }
    if p.shape_prior.dim() != p.template.shape_dim() {
        return Err(RegistrationError::DimensionMismatch {
            field: "shape prior",
            expected: p.template.shape_dim(),
            got: p.shape_prior.dim(),
        });
    }
    Ok(())
}

fn cameras_degenerate(cameras: &[Camera]) -> bool {
    if cameras.len() < 2 {
        return false;
    }
    let first = cameras[0].forward();
    cameras
        .iter()
        .skip(1)
        .all(|c| first.dot(&c.forward()).abs() > 1.0 - 1e-9)
}

/// Minimize the multi-view joint reprojection error with Mahalanobis priors
/// on pose and shape, starting from the prior means.
#[allow(clippy::too_many_arguments)]
pub fn fit_pose_shape(
    observations: &[JointObservations],
    cameras: &[Camera],
    template: &BodyTemplate,
    pose_prior: &GaussianPrior,
    shape_prior: &GaussianPrior,
    lambda_pose: f64,
    lambda_shape: f64,
) -> Result<PoseShapeFit, RegistrationError> {
    let problem = Problem {
        template,
        observations,
        cameras,
        pose_prior,
        shape_prior,
        lambda_pose,
        lambda_shape,
    };
    check_dimensions(&problem)?;

    let k3 = 3 * template.joint_count();
    let np = k3 + template.shape_dim();
    let mut x = DVector::zeros(np);
    x.rows_mut(0, k3).copy_from(pose_prior.mean());
    x.rows_mut(k3, template.shape_dim()).copy_from(shape_prior.mean());

    let (r0, _, mut rmse, _) = problem.assemble(&x, false)?;
    let mut cost = r0.norm_squared();
    let mut damping = 1e-4;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..MAX_ITERATIONS {
        iterations = it + 1;
        let (r, j, _, _) = problem.assemble(&x, true)?;
        let j = j.unwrap();
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        if g.amax() < 1e-12 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..MAX_REJECTS {
            let mut lhs = jtj.clone();
            for d in 0..np {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let x_new = &x + &step;
            let (r_new, _, rmse_new, _) = problem.assemble(&x_new, false)?;
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                let improvement = cost - cost_new;
                x = x_new;
                cost = cost_new;
                rmse = rmse_new;
                damping = (damping * 0.3).max(1e-12);
                accepted = true;
                if improvement < 1e-14 * (1.0 + cost) || step.norm() < 1e-14 {
                    converged = true;
                }
                break;
            }
            damping *= 6.0;
        }
        if !accepted {
            // No downhill step found at any damping: treat as converged to a
            // (possibly local) optimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let (pose, shape) = problem.split(&x);
    Ok(PoseShapeFit {
        pose,
        shape,
        final_cost: cost,
        reprojection_rmse: rmse,
        converged,
        degenerate_cameras: cameras_degenerate(cameras),
        iterations,
    })
}

/// Exact value of the pose/shape objective at (pose, shape).
#[allow(clippy::too_many_arguments)]
pub fn pose_shape_objective(
    observations: &[JointObservations],
    cameras: &[Camera],
    template: &BodyTemplate,
    pose_prior: &GaussianPrior,
    shape_prior: &GaussianPrior,
    lambda_pose: f64,
    lambda_shape: f64,
    pose: &PoseParams,
    shape: &ShapeParams,
) -> Result<f64, RegistrationError> {
    let problem = Problem {
        template,
        observations,
        cameras,
        pose_prior,
        shape_prior,
        lambda_pose,
        lambda_shape,
    };
    check_dimensions(&problem)?;
    let mut x = DVector::zeros(3 * template.joint_count() + template.shape_dim());
    x.rows_mut(0, pose.0.len()).copy_from_slice(&pose.0);
    x.rows_mut(pose.0.len(), shape.0.len()).copy_from_slice(&shape.0);
    let (r, _, _, _) = problem.assemble(&x, false)?;
    Ok(r.norm_squared())
}

/// Analytic gradient of the pose/shape objective with respect to the stacked
/// [pose; shape] vector.
#[allow(clippy::too_many_arguments)]
pub fn pose_shape_gradient(
    observations: &[JointObservations],
    cameras: &[Camera],
    template: &BodyTemplate,
    pose_prior: &GaussianPrior,
    shape_prior: &GaussianPrior,
    lambda_pose: f64,
    lambda_shape: f64,
    pose: &PoseParams,
    shape: &ShapeParams,
) -> Result<DVector<f64>, RegistrationError> {
    let problem = Problem {
        template,
        observations,
        cameras,
        pose_prior,
        shape_prior,
        lambda_pose,
        lambda_shape,
    };
    check_dimensions(&problem)?;
    let mut x = DVector::zeros(3 * template.joint_count() + template.shape_dim());
    x.rows_mut(0, pose.0.len()).copy_from_slice(&pose.0);
    x.rows_mut(pose.0.len(), shape.0.len()).copy_from_slice(&shape.0);
    let (r, j, _, _) = problem.assemble(&x, true)?;
    Ok(j.unwrap().transpose() * r * 2.0)
}

/// Forward-project a template's posed joints into a set of cameras, as exact
/// synthetic detections (confidence 1). Test and dataset plumbing.
pub fn project_joints(
    template: &BodyTemplate,
    pose: &PoseParams,
    shape: &ShapeParams,
    cameras: &[Camera],
) -> Result<Vec<JointObservations>, RegistrationError> {
    let joints: Vec<Point3<f64>> = template.posed_joints(pose, shape)?;
    Ok(cameras
        .iter()
        .map(|cam| JointObservations {
            joints: joints
                .iter()
                .map(|p| match cam.project(p) {
                    Some((u, v)) => [u, v, 1.0],
                    None => [0.0, 0.0, 0.0],
                })
                .collect(),
        })
        .collect())
}
