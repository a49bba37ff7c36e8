//! Non-rigid registration: alternate damped Gauss-Newton on (pose, shape)
//! with a linear solve for the free vertices, against scan correspondences
//! refreshed every outer iteration and reweighted by the robust kernel.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};

use crate::body_model::{BodyTemplate, OffsetField, PoseParams, ShapeParams};
use crate::mesh::{Mesh, TriangleBvh};
use crate::registration::jacobians::FkJacobians;
use crate::registration::{
    geman_mcclure, geman_mcclure_weight, GaussianPrior, RegistrationConfig, RegistrationError, Scan,
};

/// Energy components of the registration objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub data: f64,
    pub coupling: f64,
    pub prior: f64,
}

/// A fitted registration: model parameters plus the free-vertex mesh coupled
/// to them.
#[derive(Debug, Clone)]
pub struct Registration {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    /// Free vertices A, same topology as the template.
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// Accepted total energies, starting at the initial state; non-increasing.
    pub energy_trace: Vec<f64>,
    pub breakdown: EnergyBreakdown,
    pub converged: bool,
}

impl Registration {
    pub fn mesh(&self) -> Mesh {
        Mesh::new(self.vertices.clone(), self.faces.clone())
    }

    /// Express A - M(pose, shape) back in template space by inverting each
    /// vertex's blended skinning transform: the clothing offsets the
    /// registration explains. Offsets exceeding `cap` are clamped.
    pub fn recover_offsets(
        &self,
        template: &BodyTemplate,
        cap: f64,
    ) -> Result<OffsetField, RegistrationError> {
        let jac = FkJacobians::compute(template, &self.pose, &self.shape)?;
        let mut offsets = Vec::with_capacity(self.vertices.len());
        for v in 0..self.vertices.len() {
            let m = jac.model_vertex(template, v);
            let delta = self.vertices[v] - m;
            let mut blend = Matrix3::zeros();
            for &(j, w) in &template.skin_weights()[v] {
                blend += jac.fk.vertex_transforms[j].fixed_view::<3, 3>(0, 0) * w;
            }
            let local = blend.try_inverse().map(|inv| inv * delta).unwrap_or(delta);
            let norm = local.norm();
            offsets.push(if norm > cap { local * (cap / norm) } else { local });
        }
        Ok(OffsetField { offsets, cap })
    }
}

const MIN_SCAN_POINTS: usize = 10;
const INNER_GN_ITERATIONS: usize = 6;
const CG_MAX_ITERATIONS: usize = 400;

struct Footpoint {
    weight: f64,
    verts: [usize; 3],
    bary: [f64; 3],
    target: Point3<f64>,
}

fn default_priors(
    template: &BodyTemplate,
    config: &RegistrationConfig,
) -> (GaussianPrior, GaussianPrior) {
    let pose = config
        .pose_prior
        .clone()
        .unwrap_or_else(|| GaussianPrior::isotropic(3 * template.joint_count(), 1.0));
    let shape = config
        .shape_prior
        .clone()
        .unwrap_or_else(|| GaussianPrior::isotropic(template.shape_dim(), 1.0));
    (pose, shape)
}

fn prior_energy(
    pose: &PoseParams,
    shape: &ShapeParams,
    pose_prior: &GaussianPrior,
    shape_prior: &GaussianPrior,
    config: &RegistrationConfig,
) -> Result<f64, RegistrationError> {
    let pv = DVector::from_column_slice(&pose.0);
    let sv = DVector::from_column_slice(&shape.0);
    Ok(config.lambda_pose * pose_prior.mahalanobis(&pv)?
        + config.lambda_shape * shape_prior.mahalanobis(&sv)?)
}

/// Exact registration energy at an arbitrary state. Closest points are
/// recomputed, so this is the true objective, not a linearization.
pub fn registration_objective(
    template: &BodyTemplate,
    scan: &Scan,
    pose: &PoseParams,
    shape: &ShapeParams,
    vertices: &[Point3<f64>],
    config: &RegistrationConfig,
) -> Result<EnergyBreakdown, RegistrationError> {
    let (pose_prior, shape_prior) = default_priors(template, config);
    let bvh = TriangleBvh::build(Mesh::new(vertices.to_vec(), template.faces().to_vec()));
    let mut data = 0.0;
    for p in &scan.points {
        let hit = bvh.closest_point(p).ok_or(RegistrationError::EmptyMesh)?;
        data += geman_mcclure(hit.distance, config.sigma_gm);
    }
    let jac = FkJacobians::compute(template, pose, shape)?;
    let mut coupling = 0.0;
    for v in 0..vertices.len() {
        let m = jac.model_vertex(template, v);
        coupling += config.vertex_weights[v] * (vertices[v] - m).norm_squared();
    }
    let prior = prior_energy(pose, shape, &pose_prior, &shape_prior, config)?;
    Ok(EnergyBreakdown { total: data + coupling + prior, data, coupling, prior })
}

/// Analytic gradient of the registration objective with respect to the
/// stacked [pose; shape; vertices] vector.
pub fn registration_gradient(
    template: &BodyTemplate,
    scan: &Scan,
    pose: &PoseParams,
    shape: &ShapeParams,
    vertices: &[Point3<f64>],
    config: &RegistrationConfig,
) -> Result<DVector<f64>, RegistrationError> {
    let (pose_prior, shape_prior) = default_priors(template, config);
    let n = vertices.len();
    let np = 3 * template.joint_count() + template.shape_dim();
    let mut grad = DVector::zeros(np + 3 * n);

    // Data term: envelope through the fixed footpoint.
    let bvh = TriangleBvh::build(Mesh::new(vertices.to_vec(), template.faces().to_vec()));
    let s2 = config.sigma_gm * config.sigma_gm;
    for p in &scan.points {
        let hit = bvh.closest_point(p).ok_or(RegistrationError::EmptyMesh)?;
        let d = hit.distance * hit.distance + s2;
        let scale = 2.0 * s2 / (d * d);
        let diff = hit.point - p;
        let face = template.faces()[hit.face];
        for c in 0..3 {
            let v = face[c];
            let g = diff * (scale * hit.barycentric[c]);
            grad[np + 3 * v] += g.x;
            grad[np + 3 * v + 1] += g.y;
            grad[np + 3 * v + 2] += g.z;
        }
    }

    // Coupling term.
    let jac = FkJacobians::compute(template, pose, shape)?;
    for v in 0..n {
        let m = jac.model_vertex(template, v);
        let diff = vertices[v] - m;
        let w = config.vertex_weights[v];
        grad[np + 3 * v] += 2.0 * w * diff.x;
        grad[np + 3 * v + 1] += 2.0 * w * diff.y;
        grad[np + 3 * v + 2] += 2.0 * w * diff.z;
        for param in 0..np {
            let dm = jac.model_vertex_jacobian(template, v, param);
            grad[param] -= 2.0 * w * diff.dot(&dm);
        }
    }

    // Priors.
    let pv = DVector::from_column_slice(&pose.0);
    let gp = pose_prior.mahalanobis_gradient(&pv) * config.lambda_pose;
    for i in 0..pv.len() {
        grad[i] += gp[i];
    }
    let sv = DVector::from_column_slice(&shape.0);
    let gs = shape_prior.mahalanobis_gradient(&sv) * config.lambda_shape;
    for i in 0..sv.len() {
        grad[pv.len() + i] += gs[i];
    }
    Ok(grad)
}

/// Register the template against a scan starting from the given parameters.
///
/// Each outer iteration refreshes scan-to-surface correspondences, reweights
/// them through the robust kernel, runs damped Gauss-Newton on (pose, shape)
/// against the coupling term, then solves the free vertices in closed form
/// (conjugate gradients on the sparse normal equations). Steps that increase
/// the exact energy are rejected and the damping increased, so the recorded
/// trace is non-increasing.
pub fn register(
    scan: &Scan,
    template: &BodyTemplate,
    init_pose: &PoseParams,
    init_shape: &ShapeParams,
    config: &RegistrationConfig,
) -> Result<Registration, RegistrationError> {
    if scan.len() < MIN_SCAN_POINTS {
        return Err(RegistrationError::ScanTooSmall { points: scan.len(), minimum: MIN_SCAN_POINTS });
    }
    if config.vertex_weights.len() != template.vertex_count() {
        return Err(RegistrationError::DimensionMismatch {
            field: "vertex_weights",
            expected: template.vertex_count(),
            got: config.vertex_weights.len(),
        });
    }
    let (pose_prior, shape_prior) = default_priors(template, config);

    let mut pose = init_pose.clone();
    let mut shape = init_shape.clone();
    let jac = FkJacobians::compute(template, &pose, &shape)?;
    let mut vertices: Vec<Point3<f64>> = (0..template.vertex_count())
        .map(|v| jac.model_vertex(template, v))
        .collect();

    let mut energy = registration_objective(template, scan, &pose, &shape, &vertices, config)?;
    if !energy.total.is_finite() {
        return Err(RegistrationError::Diverged { iteration: 0, trace: vec![] });
    }
    let mut trace = vec![energy.total];
    let mut damping = config.initial_damping;
    let mut converged = false;

    for outer in 0..config.outer_iterations {
        let snapshot = (pose.clone(), shape.clone(), vertices.clone());

        // 1. Refresh correspondences with robust weights.
        let bvh = TriangleBvh::build(Mesh::new(vertices.clone(), template.faces().to_vec()));
        let footpoints: Vec<Footpoint> = scan
            .points
            .iter()
            .map(|p| {
                let hit = bvh.closest_point(p).ok_or(RegistrationError::EmptyMesh)?;
                Ok(Footpoint {
                    weight: geman_mcclure_weight(hit.distance, config.sigma_gm),
                    verts: template.faces()[hit.face],
                    bary: hit.barycentric,
                    target: *p,
                })
            })
            .collect::<Result<_, RegistrationError>>()?;

        // 2. Damped Gauss-Newton on (pose, shape) against the coupling term.
        gauss_newton_pose_shape(
            template,
            &vertices,
            &mut pose,
            &mut shape,
            &pose_prior,
            &shape_prior,
            config,
            damping,
        )?;

        // 3. Linear solve for the free vertices with footpoints fixed.
        let jac = FkJacobians::compute(template, &pose, &shape)?;
        let model: Vec<Point3<f64>> = (0..vertices.len())
            .map(|v| jac.model_vertex(template, v))
            .collect();
        vertices = solve_vertices(
            &model,
            &vertices,
            &footpoints,
            &config.vertex_weights,
            damping,
            config.inner_tolerance,
        );

        // 4. Exact energy; reject uphill steps.
        let new_energy = registration_objective(template, scan, &pose, &shape, &vertices, config)?;
        if !new_energy.total.is_finite() {
            return Err(RegistrationError::Diverged { iteration: outer, trace });
        }
        if new_energy.total > energy.total {
            pose = snapshot.0;
            shape = snapshot.1;
            vertices = snapshot.2;
            damping *= 10.0;
            if damping > 1e12 {
                break;
            }
            continue;
        }
        let improvement = energy.total - new_energy.total;
        energy = new_energy;
        trace.push(energy.total);
        damping = (damping * 0.5).max(1e-9);
        if improvement < 1e-10 * (1.0 + energy.total) {
            converged = true;
            break;
        }
    }

    Ok(Registration {
        pose,
        shape,
        vertices,
        faces: template.faces().to_vec(),
        energy_trace: trace,
        breakdown: energy,
        converged,
    })
}

/// Minimize coupling + priors over (pose, shape) with the free vertices
/// fixed. Steps are accepted only when the inner cost decreases.
#[allow(clippy::too_many_arguments)]
fn gauss_newton_pose_shape(
    template: &BodyTemplate,
    vertices: &[Point3<f64>],
    pose: &mut PoseParams,
    shape: &mut ShapeParams,
    pose_prior: &GaussianPrior,
    shape_prior: &GaussianPrior,
    config: &RegistrationConfig,
    initial_damping: f64,
) -> Result<(), RegistrationError> {
    let n = vertices.len();
    let k3 = 3 * template.joint_count();
    let np = k3 + template.shape_dim();

    let cost = |p: &PoseParams, s: &ShapeParams| -> Result<f64, RegistrationError> {
        let jac = FkJacobians::compute(template, p, s)?;
        let mut c = 0.0;
        for v in 0..n {
            let m = jac.model_vertex(template, v);
            c += config.vertex_weights[v] * (vertices[v] - m).norm_squared();
        }
        Ok(c + prior_energy(p, s, pose_prior, shape_prior, config)?)
    };

    let mut current = cost(pose, shape)?;
    let mut damping = initial_damping.max(1e-6);

    for _ in 0..INNER_GN_ITERATIONS {
        let jac = FkJacobians::compute(template, pose, shape)?;
        // Normal equations assembled directly: rows are sqrt(w_v) * (A_v - M_v).
        let mut jtj: DMatrix<f64> = DMatrix::zeros(np, np);
        let mut jtr: DVector<f64> = DVector::zeros(np);
        let mut jrow = vec![Vector3::zeros(); np];
        for v in 0..n {
            let w = config.vertex_weights[v];
            if w == 0.0 {
                continue;
            }
            let m = jac.model_vertex(template, v);
            let r = vertices[v] - m;
            for (param, slot) in jrow.iter_mut().enumerate() {
                // d residual / d param = -dM/dparam
                *slot = -jac.model_vertex_jacobian(template, v, param);
            }
            for a in 0..np {
                jtr[a] += w * jrow[a].dot(&r);
                for b in a..np {
                    jtj[(a, b)] += w * jrow[a].dot(&jrow[b]);
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        // Prior rows.
        let pv = DVector::from_column_slice(&pose.0);
        let sv = DVector::from_column_slice(&shape.0);
        let jp = pose_prior.sqrt_precision() * config.lambda_pose.sqrt();
        let js = shape_prior.sqrt_precision() * config.lambda_shape.sqrt();
        let rp = &jp * (&pv - pose_prior.mean());
        let rs = &js * (&sv - shape_prior.mean());
        for a in 0..k3 {
            for b in 0..k3 {
                let mut acc = 0.0;
                for r in 0..k3 {
                    acc += jp[(r, a)] * jp[(r, b)];
                }
                jtj[(a, b)] += acc;
            }
        }
        for a in 0..(np - k3) {
            for b in 0..(np - k3) {
                let mut acc = 0.0;
                for r in 0..(np - k3) {
                    acc += js[(r, a)] * js[(r, b)];
                }
                jtj[(k3 + a, k3 + b)] += acc;
            }
        }
        for a in 0..k3 {
            let mut acc = 0.0;
            for r in 0..k3 {
                acc += jp[(r, a)] * rp[r];
            }
            jtr[a] -= acc;
        }
        for a in 0..(np - k3) {
            let mut acc = 0.0;
            for r in 0..(np - k3) {
                acc += js[(r, a)] * rs[r];
            }
            jtr[k3 + a] -= acc;
        }

        let mut stepped = false;
        for _ in 0..8 {
            let mut lhs = jtj.clone();
            for d in 0..np {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let mut new_pose = pose.clone();
            let mut new_shape = shape.clone();
            for i in 0..k3 {
                new_pose.0[i] += step[i];
            }
            for i in 0..(np - k3) {
                new_shape.0[i] += step[k3 + i];
            }
            let new_cost = cost(&new_pose, &new_shape)?;
            if new_cost < current {
                *pose = new_pose;
                *shape = new_shape;
                current = new_cost;
                damping = (damping * 0.3).max(1e-9);
                stepped = true;
                break;
            }
            damping *= 10.0;
        }
        if !stepped {
            break;
        }
    }
    Ok(())
}

/// Conjugate-gradient solve of the quadratic in the free vertices:
/// coupling + damping-proximal diagonal plus rank-one footpoint terms.
fn solve_vertices(
    model: &[Point3<f64>],
    previous: &[Point3<f64>],
    footpoints: &[Footpoint],
    weights: &[f64],
    damping: f64,
    tolerance: f64,
) -> Vec<Point3<f64>> {
    let n = model.len();
    let diag: Vec<f64> = weights.iter().map(|w| w + damping).collect();

    let apply = |x: &[Vector3<f64>], out: &mut [Vector3<f64>]| {
        for i in 0..n {
            out[i] = x[i] * diag[i];
        }
        for fp in footpoints {
            if fp.weight == 0.0 {
                continue;
            }
            let s = x[fp.verts[0]] * fp.bary[0]
                + x[fp.verts[1]] * fp.bary[1]
                + x[fp.verts[2]] * fp.bary[2];
            for c in 0..3 {
                out[fp.verts[c]] += s * (fp.weight * fp.bary[c]);
            }
        }
    };

    let mut rhs: Vec<Vector3<f64>> = (0..n)
        .map(|i| model[i].coords * weights[i] + previous[i].coords * damping)
        .collect();
    for fp in footpoints {
        for c in 0..3 {
            rhs[fp.verts[c]] += fp.target.coords * (fp.weight * fp.bary[c]);
        }
    }

    let mut x: Vec<Vector3<f64>> = previous.iter().map(|p| p.coords).collect();
    let mut ax = vec![Vector3::zeros(); n];
    apply(&x, &mut ax);
    let mut r: Vec<Vector3<f64>> = (0..n).map(|i| rhs[i] - ax[i]).collect();
    let mut p = r.clone();
    let dot = |a: &[Vector3<f64>], b: &[Vector3<f64>]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
    };
    let rhs_norm = dot(&rhs, &rhs).sqrt().max(1e-30);
    let mut rr = dot(&r, &r);
    let mut ap = vec![Vector3::zeros(); n];
    for _ in 0..CG_MAX_ITERATIONS {
        if rr.sqrt() / rhs_norm < tolerance {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap).max(1e-300);
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + p[i] * beta;
        }
    }
    x.into_iter().map(Point3::from).collect()
}
