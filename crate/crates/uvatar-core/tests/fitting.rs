//! Pose/shape fitting and non-rigid registration against synthetic ground
//! truth, plus finite-difference validation of the analytic gradients.

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uvatar_core::body_model::{OffsetField, PoseParams, ShapeParams};
use uvatar_core::mesh::TriangleBvh;
use uvatar_core::registration::{
    fit_pose_shape, pose_shape_gradient, pose_shape_objective, project_joints, register,
    registration_gradient, registration_objective, GaussianPrior, JointObservations,
    RegistrationConfig, Scan,
};
use uvatar_core::synth::{camera_ring, make_humanoid, synth_scan, Humanoid, HumanoidSpec};

fn humanoid() -> Humanoid {
    make_humanoid(&HumanoidSpec::default()).unwrap()
}

fn small_humanoid() -> Humanoid {
    make_humanoid(&HumanoidSpec { ring_segments: 8, length_segments: 4, ..Default::default() }).unwrap()
}

fn bend_pose(k: usize) -> PoseParams {
    let mut pose = PoseParams::zeros(k);
    pose.set_joint(0, Vector3::new(0.0, 0.25, 0.0)); // root yaw
    pose.set_joint(11, Vector3::new(0.0, 0.0, 0.5)); // left elbow
    pose.set_joint(14, Vector3::new(0.0, 0.0, -0.4)); // right elbow
    pose.set_joint(5, Vector3::new(0.3, 0.0, 0.0)); // left knee
    pose.set_joint(2, Vector3::new(0.1, 0.0, 0.05)); // chest
    pose
}

/// Smooth clothing offsets along the outward vertex normals, shaped along
/// height and well within the cap. Normal-directed offsets are observable
/// from surface samples everywhere, caps included.
fn smooth_offsets(h: &Humanoid) -> OffsetField {
    let t = &h.template;
    let mut normals = vec![Vector3::zeros(); t.vertex_count()];
    for f in 0..t.faces().len() {
        let [a, b, c] = t.faces()[f];
        let pa = t.vertices()[a];
        let pb = t.vertices()[b];
        let pc = t.vertices()[c];
        let n = (pb - pa).cross(&(pc - pa));
        normals[a] += n;
        normals[b] += n;
        normals[c] += n;
    }
    let offsets: Vec<Vector3<f64>> = t
        .vertices()
        .iter()
        .zip(&normals)
        .map(|(p, n)| {
            let len = n.norm();
            if len < 1e-12 {
                Vector3::zeros()
            } else {
                // Taper to zero near part junctions (hips, knees, elbows) so
                // the offset surfaces of touching parts never cross.
                let ramp = |d: f64| (d / 0.08).clamp(0.0, 1.0);
                let taper = ramp((p.y - 0.895).abs())
                    * ramp((p.y - 0.55).abs())
                    * ramp((p.x.abs() - 0.50).abs());
                let amp = (0.006 * (1.0 + (3.0 * p.y).sin()) + 0.002) * taper;
                n / len * amp
            }
        })
        .collect();
    OffsetField::new(offsets, 0.15).unwrap()
}

#[test]
fn fit_recovers_pose_from_eight_views() {
    let h = humanoid();
    let t = &h.template;
    let pose_true = bend_pose(16);
    let shape_true = ShapeParams(vec![0.3, -0.4]);
    let cameras = camera_ring(8, 3.0, 0.95, None, 300.0, 256, 256);
    let obs = project_joints(t, &pose_true, &shape_true, &cameras).unwrap();
    let pose_prior = GaussianPrior::isotropic(48, 1.0);
    let shape_prior = GaussianPrior::isotropic(2, 1.0);
    let fit = fit_pose_shape(&obs, &cameras, t, &pose_prior, &shape_prior, 1e-6, 1e-6).unwrap();
    assert!(
        fit.reprojection_rmse < 1e-4,
        "rmse {} px after {} iterations",
        fit.reprojection_rmse,
        fit.iterations
    );
    assert!(!fit.degenerate_cameras);
}

#[test]
fn fit_with_no_detections_returns_prior_mean_exactly() {
    let h = small_humanoid();
    let t = &h.template;
    let cameras = camera_ring(2, 3.0, 0.95, None, 300.0, 256, 256);
    let zero_obs: Vec<JointObservations> = cameras
        .iter()
        .map(|_| JointObservations { joints: vec![[0.0, 0.0, 0.0]; 16] })
        .collect();
    let mut mean = DVector::zeros(48);
    mean[4] = 0.21;
    mean[30] = -0.37;
    let pose_prior = GaussianPrior::new(mean.clone(), DMatrix::identity(48, 48)).unwrap();
    let shape_mean = DVector::from_vec(vec![0.5, -0.25]);
    let shape_prior = GaussianPrior::new(shape_mean.clone(), DMatrix::identity(2, 2)).unwrap();
    let fit = fit_pose_shape(&zero_obs, &cameras, t, &pose_prior, &shape_prior, 1.0, 1.0).unwrap();
    assert_eq!(fit.pose.0, mean.as_slice());
    assert_eq!(fit.shape.0, shape_mean.as_slice());
}

#[test]
fn single_camera_root_yaw_matches_sweep_oracle() {
    let h = humanoid();
    let t = &h.template;
    let yaw_true = 0.4;
    let mut pose_true = PoseParams::zeros(16);
    pose_true.set_joint(0, Vector3::new(0.0, yaw_true, 0.0));
    let shape_true = ShapeParams::zeros(2);
    let cameras = camera_ring(1, 3.0, 0.95, None, 300.0, 256, 256);
    let obs = project_joints(t, &pose_true, &shape_true, &cameras).unwrap();

    // 1-DoF sweep oracle over the root yaw.
    let mut best = (f64::INFINITY, 0.0);
    let mut yaw = -std::f64::consts::PI;
    while yaw <= std::f64::consts::PI {
        let mut p = PoseParams::zeros(16);
        p.set_joint(0, Vector3::new(0.0, yaw, 0.0));
        let joints = t.posed_joints(&p, &shape_true).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for (cam, o) in cameras.iter().zip(&obs) {
            for (k, j) in o.joints.iter().enumerate() {
                if j[2] > 0.0 {
                    if let Some((u, v)) = cam.project(&joints[k]) {
                        sq += (u - j[0]).powi(2) + (v - j[1]).powi(2);
                        n += 1;
                    }
                }
            }
        }
        let rmse = (sq / n as f64).sqrt();
        if rmse < best.0 {
            best = (rmse, yaw);
        }
        yaw += 1e-3;
    }
    assert!((best.1 - yaw_true).abs() < 2e-3, "sweep found {}", best.1);

    // Pin every non-root parameter with a stiff prior so the fit is the
    // 3-DoF root problem the sweep answers.
    let mut precision = DMatrix::identity(48, 48) * 1e6;
    for i in 0..3 {
        precision[(i, i)] = 1e-6;
    }
    let pose_prior = GaussianPrior::new(DVector::zeros(48), precision).unwrap();
    let shape_prior = GaussianPrior::new(DVector::zeros(2), DMatrix::identity(2, 2) * 1e6).unwrap();
    let fit = fit_pose_shape(&obs, &cameras, t, &pose_prior, &shape_prior, 1.0, 1.0).unwrap();
    assert!(fit.reprojection_rmse < 1e-3, "rmse {}", fit.reprojection_rmse);
    let recovered_yaw = fit.pose.joint(0).y;
    assert!(
        (recovered_yaw - best.1).abs() < 2e-3,
        "recovered {recovered_yaw}, sweep {}",
        best.1
    );
}

#[test]
fn pose_shape_gradient_matches_central_differences() {
    let h = small_humanoid();
    let t = &h.template;
    let cameras = camera_ring(2, 3.0, 0.95, None, 300.0, 256, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    // Noisy targets so the objective has non-trivial gradients everywhere.
    let obs: Vec<JointObservations> = cameras
        .iter()
        .map(|_| JointObservations {
            joints: (0..16)
                .map(|_| [rng.gen_range(80.0..176.0), rng.gen_range(80.0..176.0), 1.0])
                .collect(),
        })
        .collect();
    let pose_prior = GaussianPrior::isotropic(48, 1.0);
    let shape_prior = GaussianPrior::isotropic(2, 1.0);

    for trial in 0..20 {
        let pose = PoseParams((0..48).map(|_| rng.gen_range(-0.3..0.3)).collect());
        let shape = ShapeParams(vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        let grad = pose_shape_gradient(
            &obs, &cameras, t, &pose_prior, &shape_prior, 1.0, 1.0, &pose, &shape,
        )
        .unwrap();
        let eval = |p: &PoseParams, s: &ShapeParams| {
            pose_shape_objective(&obs, &cameras, t, &pose_prior, &shape_prior, 1.0, 1.0, p, s)
                .unwrap()
        };
        let step = 1e-6;
        for i in 0..50 {
            let mut pp = pose.clone();
            let mut pm = pose.clone();
            let mut sp = shape.clone();
            let mut sm = shape.clone();
            if i < 48 {
                pp.0[i] += step;
                pm.0[i] -= step;
            } else {
                sp.0[i - 48] += step;
                sm.0[i - 48] -= step;
            }
            let fd = (eval(&pp, &sp) - eval(&pm, &sm)) / (2.0 * step);
            let a = grad[i];
            let rel = (a - fd).abs() / f64::max(1.0, a.abs().max(fd.abs()));
            assert!(rel < 1e-4, "trial {trial} param {i}: analytic {a}, fd {fd}, rel {rel}");
        }
    }
}

#[test]
fn register_recovers_noiseless_synthetic_scan() {
    let h = humanoid();
    let t = &h.template;
    let pose_true = bend_pose(16);
    let shape_true = ShapeParams(vec![0.2, -0.3]);
    let offsets_true = smooth_offsets(&h);
    let scan = synth_scan(t, &pose_true, &shape_true, &offsets_true, 5000, 0.0, 13).unwrap();

    // Priors centered on the initialization, as the pipeline supplies them
    // from the joint-fit stage; a noiseless scan warrants a tight robust
    // width.
    let mut config = RegistrationConfig::uniform(t.vertex_count());
    config.sigma_gm = 0.01;
    config.outer_iterations = 150;
    config.pose_prior = Some(
        GaussianPrior::new(DVector::from_column_slice(&pose_true.0), DMatrix::identity(48, 48)).unwrap(),
    );
    config.shape_prior = Some(
        GaussianPrior::new(DVector::from_column_slice(&shape_true.0), DMatrix::identity(2, 2)).unwrap(),
    );
    let start = std::time::Instant::now();
    let reg = register(&scan, t, &pose_true, &shape_true, &config).unwrap();
    let elapsed = start.elapsed();

    // Energy trace is non-increasing.
    for w in reg.energy_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "trace increased: {w:?}");
    }

    // Mean scan-to-registration distance below 0.1 mm.
    let bvh = TriangleBvh::build(reg.mesh());
    let mean_dist: f64 = scan
        .points
        .iter()
        .map(|p| bvh.closest_point(p).unwrap().distance)
        .sum::<f64>()
        / scan.len() as f64;
    assert!(mean_dist < 1e-4, "mean distance {mean_dist}");

    // Offsets recovered on well-sampled vertices.
    let mut support = vec![0.0f64; t.vertex_count()];
    for p in &scan.points {
        let hit = bvh.closest_point(p).unwrap();
        let face = t.faces()[hit.face];
        for c in 0..3 {
            support[face[c]] += hit.barycentric[c];
        }
    }
    let recovered = reg.recover_offsets(t, 0.15).unwrap();
    let mut sq = 0.0;
    let mut n = 0usize;
    for v in 0..t.vertex_count() {
        if support[v] >= 1.0 {
            sq += (recovered.offsets[v] - offsets_true.offsets[v]).norm_squared();
            n += 1;
        }
    }
    assert!(n > t.vertex_count() / 2, "only {n} well-sampled vertices");
    let rmse = (sq / n as f64).sqrt();
    assert!(rmse < 1e-3, "offset rmse {rmse} over {n} vertices");

    assert!(elapsed.as_secs() < 60, "registration took {elapsed:?}");
}

#[test]
fn register_with_noise_stays_close() {
    let h = humanoid();
    let t = &h.template;
    let pose_true = bend_pose(16);
    let shape_true = ShapeParams(vec![0.2, -0.3]);
    let offsets_true = smooth_offsets(&h);
    let scan = synth_scan(t, &pose_true, &shape_true, &offsets_true, 5000, 0.002, 17).unwrap();
    let mut config = RegistrationConfig::uniform(t.vertex_count());
    config.pose_prior = Some(
        GaussianPrior::new(DVector::from_column_slice(&pose_true.0), DMatrix::identity(48, 48)).unwrap(),
    );
    config.shape_prior = Some(
        GaussianPrior::new(DVector::from_column_slice(&shape_true.0), DMatrix::identity(2, 2)).unwrap(),
    );
    let reg = register(&scan, t, &pose_true, &shape_true, &config).unwrap();
    let bvh = TriangleBvh::build(reg.mesh());
    let mean_dist: f64 = scan
        .points
        .iter()
        .map(|p| bvh.closest_point(p).unwrap().distance)
        .sum::<f64>()
        / scan.len() as f64;
    assert!(mean_dist < 0.003, "mean distance {mean_dist}");
}

#[test]
fn register_at_optimum_stays_there() {
    let h = small_humanoid();
    let t = &h.template;
    let pose = PoseParams::zeros(16);
    let shape = ShapeParams::zeros(2);
    let scan = synth_scan(t, &pose, &shape, &OffsetField::zeros(t.vertex_count()), 2000, 0.0, 19).unwrap();
    let mut config = RegistrationConfig::uniform(t.vertex_count());
    // No prior pressure: the initial state is the global optimum.
    config.lambda_pose = 0.0;
    config.lambda_shape = 0.0;
    let reg = register(&scan, t, &pose, &shape, &config).unwrap();
    let jac_free = t.skin(&pose, &shape, &OffsetField::zeros(t.vertex_count())).unwrap();
    for (a, m) in reg.vertices.iter().zip(&jac_free.vertices) {
        assert!((a - m).norm() < 1e-5, "vertex moved {}", (a - m).norm());
    }
}

#[test]
fn hands_deviate_less_than_torso_under_equal_perturbation() {
    let h = humanoid();
    let t = &h.template;
    let pose = PoseParams::zeros(16);
    let shape = ShapeParams::zeros(2);
    let base = synth_scan(t, &pose, &shape, &OffsetField::zeros(t.vertex_count()), 6000, 0.0, 23).unwrap();

    // Push scan points outward by 2 cm near the left hand tip and in a torso
    // band, identically.
    let hand_center = Point3::new(0.86, 1.45, 0.0);
    let torso_center = Point3::new(0.0, 1.2, 0.0);
    let mut points = base.points.clone();
    for p in &mut points {
        if (p.clone() - hand_center).norm() < 0.09 {
            p.y += 0.02;
        }
        if (p.y - torso_center.y).abs() < 0.06 && (p.x * p.x + p.z * p.z).sqrt() < 0.2 {
            let r = Vector3::new(p.x, 0.0, p.z).normalize();
            *p += r * 0.02;
        }
    }
    let scan = Scan::new(points, None).unwrap();

    let mut config = RegistrationConfig::uniform(t.vertex_count());
    config = config.with_weighted_vertices(&h.hand_vertices, 10.0);
    config = config.with_weighted_vertices(&h.foot_vertices, 10.0);
    let reg = register(&scan, t, &pose, &shape, &config).unwrap();

    let model = t.skin(&pose, &shape, &OffsetField::zeros(t.vertex_count())).unwrap();
    let deviation = |verts: &[usize]| -> f64 {
        let sum: f64 = verts
            .iter()
            .map(|&v| (reg.vertices[v] - model.vertices[v]).norm())
            .sum();
        sum / verts.len() as f64
    };
    // Torso vertices inside the perturbed band.
    let torso_band: Vec<usize> = (0..t.vertex_count())
        .filter(|&v| {
            let p = t.vertices()[v];
            (p.y - torso_center.y).abs() < 0.06 && (p.x * p.x + p.z * p.z).sqrt() < 0.2
        })
        .collect();
    let hand_dev = deviation(&h.hand_vertices.iter().copied().filter(|&v| t.vertices()[v].x > 0.8).collect::<Vec<_>>());
    let torso_dev = deviation(&torso_band);
    assert!(
        hand_dev < torso_dev,
        "hand deviation {hand_dev} should be below torso deviation {torso_dev}"
    );
}

#[test]
fn register_rejects_tiny_scans() {
    let h = small_humanoid();
    let t = &h.template;
    let scan = Scan::new(vec![Point3::origin(); 5], None).unwrap();
    let config = RegistrationConfig::uniform(t.vertex_count());
    let err = register(&scan, t, &PoseParams::zeros(16), &ShapeParams::zeros(2), &config).unwrap_err();
    assert!(err.to_string().contains("at least 10"), "{err}");
}

#[test]
fn registration_gradient_matches_central_differences() {
    let h = small_humanoid();
    let t = &h.template;
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let scan = synth_scan(
        t,
        &PoseParams::zeros(16),
        &ShapeParams::zeros(2),
        &OffsetField::zeros(t.vertex_count()),
        60,
        0.01,
        29,
    )
    .unwrap();
    let config = RegistrationConfig::uniform(t.vertex_count());

    for _ in 0..3 {
        let pose = PoseParams((0..48).map(|_| rng.gen_range(-0.1..0.1)).collect());
        let shape = ShapeParams(vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
        let jac = t.skin(&pose, &shape, &OffsetField::zeros(t.vertex_count())).unwrap();
        let vertices: Vec<Point3<f64>> = jac
            .vertices
            .iter()
            .map(|p| {
                p + Vector3::new(
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                )
            })
            .collect();
        let grad = registration_gradient(t, &scan, &pose, &shape, &vertices, &config).unwrap();
        let np = 50;
        let eval = |p: &PoseParams, s: &ShapeParams, a: &[Point3<f64>]| {
            registration_objective(t, &scan, p, s, a, &config).unwrap().total
        };
        let step = 1e-6;
        // All pose/shape parameters plus a sample of vertex coordinates.
        let mut coords: Vec<usize> = (0..np).collect();
        for _ in 0..24 {
            coords.push(np + rng.gen_range(0..3 * vertices.len()));
        }
        for &i in &coords {
            let mut pp = pose.clone();
            let mut pm = pose.clone();
            let mut sp = shape.clone();
            let mut sm = shape.clone();
            let mut ap = vertices.clone();
            let mut am = vertices.clone();
            if i < 48 {
                pp.0[i] += step;
                pm.0[i] -= step;
            } else if i < np {
                sp.0[i - 48] += step;
                sm.0[i - 48] -= step;
            } else {
                let v = (i - np) / 3;
                let c = (i - np) % 3;
                ap[v][c] += step;
                am[v][c] -= step;
            }
            let fd = (eval(&pp, &sp, &ap) - eval(&pm, &sm, &am)) / (2.0 * step);
            let a = grad[i];
            let rel = (a - fd).abs() / f64::max(1.0, a.abs().max(fd.abs()));
            assert!(rel < 1e-4, "coord {i}: analytic {a}, fd {fd}, rel {rel}");
        }
    }
}
