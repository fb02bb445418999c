//! Pose of a planar fiducial from its image corners.
//!
//! An initial pose comes from a normalized DLT homography between the board
//! plane and normalized image coordinates. It is then refined by damped
//! Gauss-Newton (Levenberg-Marquardt) on the total squared reprojection
//! error. Observations are assumed already undistorted.

use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform, UnitQuaternion};
use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Also checks that the principal point falls inside a `width × height` image.
    pub fn with_image_size(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self::new(fx, fy, cx, cy)?;
        if !(cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64) {
            return Err(Error::InvalidArgument(format!("principal point ({cx}, {cy}) outside {width}×{height} image")));
        }
        Ok(k)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    fn normalize(&self, [u, v]: [f64; 2]) -> [f64; 2] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy]
    }
}

/// Known board-frame corner positions (mm, `z = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarTarget {
    points: Vec<Point3>,
    label: String,
}

impl PlanarTarget {
    pub fn new(points: Vec<Point3>, label: impl Into<String>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::DegenerateTarget(format!("need at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|p| !p.is_finite() || p.z != 0.0) {
            return Err(Error::DegenerateTarget("target points must be finite with z = 0".into()));
        }
        let n = points.len() as f64;
        let (mx, my) = (points.iter().map(|p| p.x).sum::<f64>() / n, points.iter().map(|p| p.y).sum::<f64>() / n);
        let m = DMatrix::from_fn(points.len(), 2, |i, j| if j == 0 { points[i].x - mx } else { points[i].y - my });
        let sv = m.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if hi == 0.0 || lo <= 1e-9 * hi {
            return Err(Error::DegenerateTarget("target points are collinear".into()));
        }
        Ok(Self { points, label: label.into() })
    }

    /// `cols × rows` inner-corner grid with `square` mm spacing, origin at the first corner.
    pub fn checkerboard(cols: usize, rows: usize, square: f64) -> Result<Self> {
        let pts = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Point3::new(c as f64 * square, r as f64 * square, 0.0)))
            .collect();
        Self::new(pts, format!("checkerboard {cols}x{rows} @ {square} mm"))
    }

    /// The four corners of a square marker of side `side` mm, centred on the origin.
    pub fn square_marker(side: f64) -> Result<Self> {
        let h = side / 2.0;
        Self::new(
            vec![Point3::new(-h, h, 0.0), Point3::new(h, h, 0.0), Point3::new(h, -h, 0.0), Point3::new(-h, -h, 0.0)],
            format!("marker {side} mm"),
        )
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Target-to-camera pose with its fit quality.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    /// RMS reprojection error, px.
    pub rms_reprojection: f64,
    /// Refinement iterations attempted.
    pub iterations: usize,
    /// Total squared reprojection error, initial value then every accepted step.
    pub cost_history: Vec<f64>,
}

/// Pinhole projection of `pose · p`.
pub fn project(intr: &CameraIntrinsics, pose: &RigidTransform, p: Point3) -> Result<[f64; 2]> {
    let x = pose.apply(p);
    if x.z <= 0.0 {
        return Err(Error::BehindCamera(x.z));
    }
    Ok([intr.fx * x.x / x.z + intr.cx, intr.fy * x.y / x.z + intr.cy])
}

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-10;

pub fn estimate_pose(intr: &CameraIntrinsics, target: &PlanarTarget, observations: &[[f64; 2]]) -> Result<PoseEstimate> {
    if observations.len() != target.points.len() {
        return Err(Error::InvalidArgument(format!(
            "{} observations for {} target points",
            observations.len(),
            target.points.len()
        )));
    }
    if observations.iter().any(|o| !o[0].is_finite() || !o[1].is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let initial = initial_pose(intr, target, observations)?;
    refine(intr, target, observations, initial)
}

/// Sum of squared reprojection errors; infinite if any point is behind the camera.
pub fn reprojection_cost(intr: &CameraIntrinsics, target: &PlanarTarget, observations: &[[f64; 2]], pose: &RigidTransform) -> f64 {
    target
        .points
        .iter()
        .zip(observations)
        .map(|(p, o)| match project(intr, pose, *p) {
            Ok([u, v]) => (u - o[0]).powi(2) + (v - o[1]).powi(2),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Hartley normalization: centroid to origin, mean distance √2.
fn normalizer(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n);
    let mean_d = pts.iter().map(|p| (p[0] - mx).hypot(p[1] - my)).sum::<f64>() / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Homography board-plane → normalized image coordinates, then `[r1 r2 t]`.
fn initial_pose(intr: &CameraIntrinsics, target: &PlanarTarget, observations: &[[f64; 2]]) -> Result<RigidTransform> {
    let src: Vec<[f64; 2]> = target.points.iter().map(|p| [p.x, p.y]).collect();
    let dst: Vec<[f64; 2]> = observations.iter().map(|o| intr.normalize(*o)).collect();
    let (ts, td) = (normalizer(&src), normalizer(&dst));
    let n = src.len();
    // At least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let [x, y] = apply_h(&ts, *s);
        let [u, v] = apply_h(&td, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::NumericalFailure("homography SVD failed".into()))?;
    let smallest = (0..svd.singular_values.len())
        .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .unwrap();
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(|| Error::NumericalFailure("singular normalizer".into()))?;
    let hm = td_inv * hn * ts;

    let (h1, h2, h3) = (hm.column(0).into_owned(), hm.column(1).into_owned(), hm.column(2).into_owned());
    let norm = 0.5 * (h1.norm() + h2.norm());
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateTarget("homography is degenerate".into()));
    }
    // Pick the sign that puts the board in front of the camera.
    let lambda = if h3.z >= 0.0 { 1.0 / norm } else { -1.0 / norm };
    let r1 = h1 * lambda;
    let r2 = h2 * lambda;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = approx.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    let t = h3 * lambda;
    let pose = RigidTransform::new(UnitQuaternion::from_matrix(&r), Point3::from_vector(&t));
    if target.points.iter().any(|p| pose.apply(*p).z <= 0.0) {
        return Err(Error::DegenerateTarget("no homography decomposition puts every point in front of the camera".into()));
    }
    Ok(pose)
}

type Mat6 = SMatrix<f64, 6, 6>;
type Vec6 = SVector<f64, 6>;

fn normal_equations(intr: &CameraIntrinsics, target: &PlanarTarget, obs: &[[f64; 2]], pose: &RigidTransform) -> (Mat6, Vec6) {
    let mut jtj = Mat6::zeros();
    let mut jtr = Vec6::zeros();
    for (p, o) in target.points.iter().zip(obs) {
        let rp = pose.rotation.rotate(*p);
        let x = rp + pose.translation;
        let iz = 1.0 / x.z;
        let ju = [intr.fx * iz, 0.0, -intr.fx * x.x * iz * iz];
        let jv = [0.0, intr.fy * iz, -intr.fy * x.y * iz * iz];
        let ru = intr.fx * x.x * iz + intr.cx - o[0];
        let rv = intr.fy * x.y * iz + intr.cy - o[1];
        // d(X)/d(omega) = -[Rp]x for a left-multiplied rotation increment
        let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
        let dxdw = -skew;
        for (jrow, r) in [(ju, ru), (jv, rv)] {
            let jp = Vector3::new(jrow[0], jrow[1], jrow[2]);
            let jw = dxdw.transpose() * jp;
            let row = Vec6::new(jw.x, jw.y, jw.z, jp.x, jp.y, jp.z);
            jtj += row * row.transpose();
            jtr += row * r;
        }
    }
    (jtj, jtr)
}

fn step_pose(pose: &RigidTransform, delta: &Vec6) -> RigidTransform {
    let dq = UnitQuaternion::from_rotation_vector(Point3::new(delta[0], delta[1], delta[2]));
    RigidTransform::new(dq * pose.rotation, pose.translation + Point3::new(delta[3], delta[4], delta[5]))
}

fn refine(intr: &CameraIntrinsics, target: &PlanarTarget, obs: &[[f64; 2]], initial: RigidTransform) -> Result<PoseEstimate> {
    let mut pose = initial;
    let mut cost = reprojection_cost(intr, target, obs, &pose);
    if !cost.is_finite() {
        return Err(Error::DivergedRefinement("initial pose has non-finite cost".into()));
    }
    let mut history = vec![cost];
    let (mut jtj, mut jtr) = normal_equations(intr, target, obs, &pose);
    let mut mu = 1e-3 * (0..6).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && cost > 0.0 {
        iterations += 1;
        let damped = jtj + Mat6::identity() * mu;
        let Some(delta) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
            mu *= 10.0;
            continue;
        };
        let candidate = step_pose(&pose, &delta);
        let new_cost = reprojection_cost(intr, target, obs, &candidate);
        if new_cost < cost {
            pose = candidate;
            cost = new_cost;
            history.push(cost);
            (jtj, jtr) = normal_equations(intr, target, obs, &pose);
            mu = (mu / 3.0).max(1e-15);
        } else {
            mu *= 4.0;
        }
        if delta.norm() < STEP_TOLERANCE {
            break;
        }
        if mu > 1e30 {
            return Err(Error::DivergedRefinement(format!("no decrease from cost {cost:.6e} at maximum damping")));
        }
    }
    let rms_reprojection = (cost / target.points.len() as f64).sqrt();
    Ok(PoseEstimate { pose, rms_reprojection, iterations, cost_history: history })
}

/// `max(rotation angle in rad, translation distance in mm)`.
pub fn composite_pose_error(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let (angle, dist) = a.pose_error(b);
    angle.max(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3x4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0).unwrap()
    }

    fn observe(intr: &CameraIntrinsics, pose: &RigidTransform, t: &PlanarTarget) -> Vec<[f64; 2]> {
        t.points().iter().map(|p| project(intr, pose, *p).unwrap()).collect()
    }

    #[test]
    fn projection_examples() {
        let id = RigidTransform::IDENTITY;
        assert_eq!(project(&k(), &id, Point3::new(0.0, 0.0, 1000.0)).unwrap(), [320.0, 240.0]);
        assert_eq!(project(&k(), &id, Point3::new(100.0, 0.0, 1000.0)).unwrap(), [400.0, 240.0]);
        assert!(matches!(project(&k(), &id, Point3::new(0.0, 0.0, -5.0)), Err(Error::BehindCamera(_))));
        assert!(matches!(project(&k(), &id, Point3::ORIGIN), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn projection_matches_camera_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let pose = RigidTransform::new(
                UnitQuaternion::from_axis_angle(Point3::new(rng.random(), rng.random(), rng.random()), rng.random_range(-0.5..0.5)),
                Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(400.0..900.0)),
            );
            let p = Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-20.0..20.0));
            let r = pose.rotation_matrix();
            let mut rt = Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            rt.set_column(3, &pose.translation.to_vector());
            let x = k().matrix() * rt * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            let [u, v] = project(&k(), &pose, p).unwrap();
            assert!((u - x.x / x.z).abs() < 1e-9 && (v - x.y / x.z).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pose_at_500mm() {
        let target = PlanarTarget::checkerboard(6, 5, 20.0).unwrap();
        let truth = RigidTransform::from_translation(Point3::new(0.0, 0.0, 500.0));
        let est = estimate_pose(&k(), &target, &observe(&k(), &truth, &target)).unwrap();
        let (angle, dist) = est.pose.pose_error(&truth);
        assert!(angle < 1e-6 && dist < 1e-6, "{angle} {dist}");
    }

    #[test]
    fn random_noiseless_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = PlanarTarget::checkerboard(8, 8, 25.0).unwrap();
        for _ in 0..20 {
            let truth = RigidTransform::new(
                UnitQuaternion::from_axis_angle(
                    Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    rng.random_range(-0.6..0.6),
                ),
                Point3::new(rng.random_range(-150.0..0.0), rng.random_range(-150.0..0.0), rng.random_range(500.0..900.0)),
            );
            let est = estimate_pose(&k(), &target, &observe(&k(), &truth, &target)).unwrap();
            assert!(composite_pose_error(&est.pose, &truth) < 1e-6);
            assert!(est.rms_reprojection < 1e-8);
            assert!(est.cost_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn target_validation() {
        assert!(matches!(PlanarTarget::checkerboard(3, 1, 10.0), Err(Error::DegenerateTarget(_))));
        assert!(matches!(PlanarTarget::checkerboard(4, 1, 10.0), Err(Error::DegenerateTarget(_))));
        let lifted = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0), Point3::new(1.0, 1.0, 0.0)];
        assert!(PlanarTarget::new(lifted, "x").is_err());
        assert!(PlanarTarget::square_marker(50.0).is_ok());
        let target = PlanarTarget::square_marker(50.0).unwrap();
        assert!(estimate_pose(&k(), &target, &[[0.0, 0.0]; 3]).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::with_image_size(800.0, 800.0, 700.0, 240.0, 640, 480).is_err());
    }
}
