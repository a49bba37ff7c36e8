//! Fitting the body model to observations: pinhole cameras, Gaussian priors,
//! the robust kernel, pose/shape estimation from 2D joints, and non-rigid
//! registration of scans with a coupled free-vertex mesh.

mod fit;
mod jacobians;
mod solve;

pub use fit::{
    fit_pose_shape, pose_shape_gradient, pose_shape_objective, project_joints, JointObservations,
    PoseShapeFit,
};
pub use jacobians::FkJacobians;
pub use solve::{
    register, registration_gradient, registration_objective, EnergyBreakdown, Registration,
};

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::mesh::{SurfaceHit, TriangleBvh};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("camera invalid: {reason}")]
    BadCamera { reason: String },
    #[error("prior invalid: {reason}")]
    BadPrior { reason: String },
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    DimensionMismatch { field: &'static str, expected: usize, got: usize },
    #[error("scan has {points} points; at least {minimum} required")]
    ScanTooSmall { points: usize, minimum: usize },
    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("registration diverged (non-finite energy) at outer iteration {iteration}; trace: {trace:?}")]
    Diverged { iteration: usize, trace: Vec<f64> },
    #[error(transparent)]
    BodyModel(#[from] crate::body_model::BodyModelError),
}

/// Pinhole camera: intrinsics in pixels plus a rigid world-to-camera
/// transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, RegistrationError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(RegistrationError::BadCamera {
                reason: format!("focal lengths must be positive, got ({fx}, {fy})"),
            });
        }
        let gram = rotation.transpose() * rotation;
        let mut dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - want).abs());
            }
        }
        if dev > 1e-9 || rotation.determinant() < 0.0 {
            return Err(RegistrationError::BadCamera {
                reason: format!("rotation not orthonormal (deviation {dev:.2e})"),
            });
        }
        Ok(Self { fx, fy, cx, cy, rotation, translation })
    }

    /// Camera at `eye` looking toward `target`, principal point at the image
    /// center. Image x runs along the horizontal, image y downward.
    pub fn look_at(
        eye: &Point3<f64>,
        target: &Point3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let up = if z.y.abs() > 0.999 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye.coords;
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
        }
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::z()
    }

    /// Pinhole projection to pixel coordinates. `None` for points at or
    /// behind the camera plane; callers exclude those from residuals.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-12 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// World-space ray through a pixel center.
    pub fn ray_through_pixel(&self, px: f64, py: f64) -> (Point3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = (self.rotation.transpose() * dir_cam).normalize();
        (self.center(), dir)
    }
}

/// Gaussian parameter prior with mean and precision (inverse covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    sqrt_precision: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self, RegistrationError> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(RegistrationError::BadPrior {
                reason: format!("precision is {}x{}, mean has length {d}", precision.nrows(), precision.ncols()),
            });
        }
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                asym = asym.max((precision[(i, j)] - precision[(j, i)]).abs());
            }
        }
        if asym > 1e-9 {
            return Err(RegistrationError::BadPrior {
                reason: format!("precision not symmetric (deviation {asym:.2e})"),
            });
        }
        let sym = nalgebra::SymmetricEigen::new(precision.clone());
        if sym.eigenvalues.iter().any(|&e| e < -1e-9) {
            return Err(RegistrationError::BadPrior {
                reason: "precision has negative eigenvalues".into(),
            });
        }
        let sqrt_vals = DVector::from_iterator(d, sym.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()));
        let sqrt_precision = &sym.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * sym.eigenvectors.transpose();
        Ok(Self { mean, precision, sqrt_precision })
    }

    pub fn isotropic(dim: usize, precision: f64) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim) * precision).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Matrix square root of the precision, for whitened residuals.
    pub fn sqrt_precision(&self) -> &DMatrix<f64> {
        &self.sqrt_precision
    }

    /// Squared Mahalanobis distance (x - mean)^T P (x - mean).
    pub fn mahalanobis(&self, x: &DVector<f64>) -> Result<f64, RegistrationError> {
        if x.len() != self.mean.len() {
            return Err(RegistrationError::DimensionMismatch {
                field: "mahalanobis input",
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        let d = x - &self.mean;
        Ok((&self.precision * &d).dot(&d))
    }

    /// Gradient of the squared Mahalanobis distance: 2 P (x - mean).
    pub fn mahalanobis_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.mean;
        &self.precision * d * 2.0
    }
}

/// Squared Mahalanobis distance under a prior.
pub fn mahalanobis(x: &DVector<f64>, prior: &GaussianPrior) -> Result<f64, RegistrationError> {
    prior.mahalanobis(x)
}

/// Geman-McClure robust kernel r^2 / (r^2 + sigma^2): zero at zero, 1/2 at
/// r = sigma, saturating toward 1.
pub fn geman_mcclure(r: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let r2 = r * r;
    r2 / (r2 + sigma * sigma)
}

/// Half-quadratic weight for the Geman-McClure kernel: rho'(r) / (2 r).
pub fn geman_mcclure_weight(r: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let d = r * r + s2;
    s2 / (d * d)
}

/// Point cloud scan, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl Scan {
    pub fn new(points: Vec<Point3<f64>>, normals: Option<Vec<Vector3<f64>>>) -> Result<Self, RegistrationError> {
        if points.is_empty() {
            return Err(RegistrationError::ScanTooSmall { points: 0, minimum: 1 });
        }
        if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(RegistrationError::NonFinite { field: "scan points" });
        }
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return Err(RegistrationError::DimensionMismatch {
                    field: "scan normals",
                    expected: points.len(),
                    got: n.len(),
                });
            }
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Configuration of the registration solver.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub lambda_pose: f64,
    pub lambda_shape: f64,
    /// Per-vertex coupling weights; hands and feet conventionally 10x the
    /// body weight.
    pub vertex_weights: Vec<f64>,
    /// Geman-McClure scale, meters.
    pub sigma_gm: f64,
    pub outer_iterations: usize,
    pub inner_tolerance: f64,
    pub initial_damping: f64,
    /// Learned priors when available; isotropic unit-precision zero-mean
    /// Gaussians otherwise.
    pub pose_prior: Option<GaussianPrior>,
    pub shape_prior: Option<GaussianPrior>,
}

impl RegistrationConfig {
    pub fn uniform(vertex_count: usize) -> Self {
        Self {
            lambda_pose: 1.0,
            lambda_shape: 1.0,
            vertex_weights: vec![1.0; vertex_count],
            sigma_gm: 0.05,
            outer_iterations: 30,
            inner_tolerance: 1e-8,
            initial_damping: 1e-4,
            pose_prior: None,
            shape_prior: None,
        }
    }

    /// Scale the coupling weight of the given vertices (e.g. hands and feet
    /// get 10x).
    pub fn with_weighted_vertices(mut self, vertices: &[usize], factor: f64) -> Self {
        for &v in vertices {
            self.vertex_weights[v] *= factor;
        }
        self
    }
}

/// Exact closest point on a mesh through its BVH. Errors on empty meshes.
pub fn point_to_surface(bvh: &TriangleBvh, point: &Point3<f64>) -> Result<SurfaceHit, RegistrationError> {
    bvh.closest_point(point).ok_or(RegistrationError::EmptyMesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_on_axis_hits_principal_point() {
        let cam = Camera::new(1000.0, 1000.0, 500.0, 500.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        let (u, v) = cam.project(&Point3::new(0.0, 0.0, 2.5)).unwrap();
        assert_eq!((u, v), (500.0, 500.0));
    }

    #[test]
    fn project_offset_point() {
        let cam = Camera::new(1000.0, 1000.0, 500.0, 500.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        let (u, v) = cam.project(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((u - 600.0).abs() < 1e-12);
        assert!((v - 500.0).abs() < 1e-12);
    }

    #[test]
    fn point_at_camera_center_is_flagged() {
        let cam = Camera::new(1000.0, 1000.0, 500.0, 500.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        assert!(cam.project(&Point3::origin()).is_none());
        assert!(cam.project(&Point3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn projection_matches_homogeneous_matrix_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let rot = crate::body_model::rodrigues(&axis);
            let t = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..4.0),
            );
            let cam = Camera::new(800.0, 820.0, 320.0, 240.0, rot, t).unwrap();
            let p = Point3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            // Homogeneous 3x4 two-step oracle: K [R|t] then dehomogenize.
            let mut k = Matrix3::identity();
            k[(0, 0)] = 800.0;
            k[(1, 1)] = 820.0;
            k[(0, 2)] = 320.0;
            k[(1, 2)] = 240.0;
            let mut rt = Matrix4::identity();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            let homog = rt * p.coords.push(1.0);
            let proj = k * Vector3::new(homog.x, homog.y, homog.z);
            let want = (proj.x / proj.z, proj.y / proj.z);
            let got = cam.project(&p).unwrap();
            assert!((got.0 - want.0).abs() < 1e-9);
            assert!((got.1 - want.1).abs() < 1e-9);
        }
    }

    #[test]
    fn mahalanobis_zero_at_mean() {
        let prior = GaussianPrior::isotropic(4, 1.0);
        assert_eq!(prior.mahalanobis(&DVector::zeros(4)).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_identity_precision_is_squared_norm() {
        let prior = GaussianPrior::isotropic(2, 1.0);
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert!((prior.mahalanobis(&x).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_matches_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let d = 5;
            let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let precision = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let mean = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let prior = GaussianPrior::new(mean.clone(), precision.clone()).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            // Spectral oracle: sum over eigenpairs of lambda_i * <v_i, x-mu>^2.
            let eig = nalgebra::SymmetricEigen::new(precision);
            let diff = &x - &mean;
            let mut want = 0.0;
            for i in 0..d {
                let v = eig.eigenvectors.column(i);
                want += eig.eigenvalues[i] * v.dot(&diff).powi(2);
            }
            assert!((prior.mahalanobis(&x).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn mahalanobis_nonnegative_zero_iff_precision_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // Singular precision: zero along the second axis.
        let mut precision = DMatrix::zeros(2, 2);
        precision[(0, 0)] = 2.0;
        let prior = GaussianPrior::new(DVector::zeros(2), precision.clone()).unwrap();
        for _ in 0..50 {
            let x = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let m = prior.mahalanobis(&x).unwrap();
            assert!(m >= 0.0);
            let grad_zero = (&precision * &x).norm() < 1e-12;
            assert_eq!(m.abs() < 1e-12, grad_zero);
        }
    }

    #[test]
    fn geman_mcclure_fixed_points() {
        assert_eq!(geman_mcclure(0.0, 0.05), 0.0);
        assert!((geman_mcclure(0.05, 0.05) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn geman_mcclure_bounded_even_monotone() {
        let sigma = 0.05;
        let mut prev = -1.0;
        for i in 0..2000 {
            let r = i as f64 * 0.01;
            let v = geman_mcclure(r, sigma);
            assert!((0.0..1.0).contains(&v));
            assert!(v >= prev);
            assert_eq!(v, geman_mcclure(-r, sigma));
            prev = v;
        }
        assert!(geman_mcclure(1e6, sigma) > 1.0 - 1e-11);
    }

    #[test]
    fn scan_rejects_non_finite() {
        let err = Scan::new(vec![Point3::new(f64::NAN, 0.0, 0.0)], None).unwrap_err();
        assert!(matches!(err, RegistrationError::NonFinite { .. }));
    }

    #[test]
    fn look_at_projects_target_to_image_center() {
        let cam = Camera::look_at(&Point3::new(0.3, 1.9, -2.5), &Point3::new(0.0, 1.0, 0.0), 500.0, 500.0, 640, 480);
        let (u, v) = cam.project(&Point3::new(0.0, 1.0, 0.0)).unwrap();
        assert!((u - 320.0).abs() < 1e-9);
        assert!((v - 240.0).abs() < 1e-9);
        // A point above the target lands higher in the image (smaller v).
        let (_, v_above) = cam.project(&Point3::new(0.0, 1.3, 0.0)).unwrap();
        assert!(v_above < v);
    }
}
