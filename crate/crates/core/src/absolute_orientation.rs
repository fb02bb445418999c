//! Closed-form absolute orientation between two corresponded point sets.
//!
//! [`solve_horn`] is the production solver: centroid alignment, then the
//! rotation as the dominant eigenvector of Horn's symmetric 4×4 matrix, then
//! the translation from the rotated centroid. [`solve_svd_oracle`] solves the
//! same problem through the SVD of the cross-covariance and exists to
//! cross-check the quaternion route.

use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform, UnitQuaternion};
use nalgebra::{DMatrix, Matrix3, Matrix4, Vector4};
use std::fmt;
use std::str::FromStr;

/// Relative singular-value threshold separating collinear sets from round-off.
pub const COLLINEARITY_TOLERANCE: f64 = 1e-9;

/// Which transform family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum FitMode {
    /// Rotation and translation, scale fixed to 1 (6 DoF).
    #[default]
    Rigid,
    /// Rotation, translation and one uniform scale (7 DoF).
    Similarity,
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Rigid => "rigid",
            FitMode::Similarity => "similarity",
        })
    }
}

impl FromStr for FitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rigid" => Ok(FitMode::Rigid),
            "similarity" => Ok(FitMode::Similarity),
            other => Err(Error::InvalidArgument(format!("unknown fit mode `{other}` (expected rigid|similarity)"))),
        }
    }
}

/// Paired points `(P_k, Q_k)`; the fitted transform maps each `P_k` onto `Q_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    source: Vec<Point3>,
    target: Vec<Point3>,
}

impl CorrespondenceSet {
    /// Validates size, finiteness and non-collinearity of both sides.
    pub fn new(source: Vec<Point3>, target: Vec<Point3>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::DegenerateInput(format!(
                "{} source points but {} target points",
                source.len(),
                target.len()
            )));
        }
        if source.len() < 3 {
            return Err(Error::DegenerateInput(format!("need at least 3 pairs, got {}", source.len())));
        }
        if source.iter().chain(&target).any(|p| !p.is_finite()) {
            return Err(Error::DegenerateInput("non-finite coordinate".into()));
        }
        for (name, pts) in [("source", &source), ("target", &target)] {
            if is_collinear(pts) {
                return Err(Error::DegenerateInput(format!("{name} points are collinear or coincident")));
            }
        }
        Ok(Self { source, target })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Point3, Point3)>) -> Result<Self> {
        let (s, t) = pairs.into_iter().unzip();
        Self::new(s, t)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Point3] {
        &self.source
    }

    pub fn target(&self) -> &[Point3] {
        &self.target
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Point3, &Point3)> {
        self.source.iter().zip(&self.target)
    }

    /// Sum of squared residuals `Σ‖Q_k − T(P_k)‖²`.
    pub fn cost(&self, t: &RigidTransform) -> f64 {
        self.pairs().map(|(p, q)| (*q - t.apply(*p)).dot(&(*q - t.apply(*p)))).sum()
    }
}

/// Rank test on the centered points: the second singular value must be
/// non-negligible relative to the first. Planar sets are fine; the image
/// points always lie in `z = 0`.
fn is_collinear(points: &[Point3]) -> bool {
    let c = centroid(points);
    let m = DMatrix::from_fn(points.len(), 3, |i, j| (points[i] - c).to_array()[j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] == 0.0 || sv[1] <= COLLINEARITY_TOLERANCE * sv[0]
}

fn centroid(points: &[Point3]) -> Point3 {
    let sum = points.iter().fold(Point3::ORIGIN, |acc, p| acc + *p);
    sum * (1.0 / points.len() as f64)
}

/// Fitted transform with its residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsOrientSolution {
    pub transform: RigidTransform,
    /// Root-mean-square residual, mm.
    pub rms_residual: f64,
    /// `‖Q_k − T(P_k)‖` per pair, mm.
    pub per_pair_residuals: Vec<f64>,
}

impl AbsOrientSolution {
    fn from_transform(c: &CorrespondenceSet, transform: RigidTransform) -> Self {
        let per_pair_residuals: Vec<f64> = c.pairs().map(|(p, q)| q.distance(&transform.apply(*p))).collect();
        let rms_residual =
            (per_pair_residuals.iter().map(|r| r * r).sum::<f64>() / per_pair_residuals.len() as f64).sqrt();
        Self { transform, rms_residual, per_pair_residuals }
    }
}

struct Centered {
    source_centroid: Point3,
    target_centroid: Point3,
    source: Vec<Point3>,
    target: Vec<Point3>,
}

fn center(c: &CorrespondenceSet) -> Centered {
    let source_centroid = centroid(c.source());
    let target_centroid = centroid(c.target());
    Centered {
        source_centroid,
        target_centroid,
        source: c.source().iter().map(|p| *p - source_centroid).collect(),
        target: c.target().iter().map(|q| *q - target_centroid).collect(),
    }
}

impl Centered {
    /// `Σ p'_k q'_kᵀ`.
    fn cross_covariance(&self) -> Matrix3<f64> {
        self.source
            .iter()
            .zip(&self.target)
            .fold(Matrix3::zeros(), |acc, (p, q)| acc + p.to_vector() * q.to_vector().transpose())
    }

    /// Symmetric scale: ratio of the root-sum-squares of the centered sets.
    /// Independent of the rotation, and inverting the problem inverts it.
    fn symmetric_scale(&self) -> f64 {
        let sp: f64 = self.source.iter().map(|p| p.dot(p)).sum();
        let sq: f64 = self.target.iter().map(|q| q.dot(q)).sum();
        (sq / sp).sqrt()
    }

    fn finish(&self, rotation: UnitQuaternion, mode: FitMode) -> Result<RigidTransform> {
        let scale = match mode {
            FitMode::Rigid => 1.0,
            FitMode::Similarity => self.symmetric_scale(),
        };
        let translation = self.target_centroid - rotation.rotate(self.source_centroid) * scale;
        RigidTransform::with_scale(rotation, translation, scale)
            .ok_or_else(|| Error::NumericalFailure(format!("invalid scale {scale}")))
    }
}

/// Horn's closed-form solution using unit quaternions.
pub fn solve_horn(c: &CorrespondenceSet, mode: FitMode) -> Result<AbsOrientSolution> {
    let centered = center(c);
    let m = centered.cross_covariance();
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);

    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );

    let (values, vectors) = jacobi_eigen(n)?;
    let best = (0..4).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    let v = vectors.column(best);
    let rotation = UnitQuaternion::try_new(v[0], v[1], v[2], v[3])
        .ok_or_else(|| Error::NumericalFailure("dominant eigenvector is zero".into()))?;
    let transform = centered.finish(rotation, mode)?;
    Ok(AbsOrientSolution::from_transform(c, transform))
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigen-decomposition of a symmetric 4×4 matrix.
///
/// Returns the eigenvalues and the matrix whose columns are the matching
/// eigenvectors.
fn jacobi_eigen(mut a: Matrix4<f64>) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite entries in the quaternion matrix".into()));
    }
    let mut v = Matrix4::<f64>::identity();
    let scale = a.norm();
    if scale == 0.0 {
        return Ok((Vector4::zeros(), v));
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale {
            return Ok((a.diagonal(), v));
        }
        for p in 0..3 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    // A sweep budget this large is only exhausted when the off-diagonal mass
    // stalls at round-off; accept that state if it is already tiny.
    let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
    if off.sqrt() <= 1e-12 * scale {
        Ok((a.diagonal(), v))
    } else {
        Err(Error::NumericalFailure(format!("Jacobi eigen-solver did not converge (off-diagonal {:.3e})", off.sqrt())))
    }
}

/// Same least-squares problem solved through the SVD of the cross-covariance.
pub fn solve_svd_oracle(c: &CorrespondenceSet, mode: FitMode) -> Result<AbsOrientSolution> {
    let centered = center(c);
    // H = Σ p' q'ᵀ = U Σ Vᵀ  →  R = V D Uᵀ
    let h = centered.cross_covariance();
    let svd = h.try_svd(true, true, f64::EPSILON, 0).ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let u = svd.u.ok_or_else(|| Error::NumericalFailure("SVD returned no U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::NumericalFailure("SVD returned no Vᵀ".into()))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * u.transpose();
    let transform = centered.finish(UnitQuaternion::from_matrix(&r), mode)?;
    Ok(AbsOrientSolution::from_transform(c, transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .collect()
    }

    fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion {
        let n = Normal::new(0.0, 1.0).unwrap();
        UnitQuaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng))
    }

    fn random_rigid(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)),
        )
    }

    fn mapped(src: &[Point3], t: &RigidTransform) -> Vec<Point3> {
        src.iter().map(|p| t.apply(*p)).collect()
    }

    #[test]
    fn identity_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 4);
        let c = CorrespondenceSet::new(p.clone(), p).unwrap();
        for sol in [solve_horn(&c, FitMode::Rigid).unwrap(), solve_svd_oracle(&c, FitMode::Rigid).unwrap()] {
            assert!(sol.transform.rotation.similarity(&UnitQuaternion::IDENTITY) > 1.0 - 1e-12);
            assert!(sol.transform.translation.norm() < 1e-12);
            assert_eq!(sol.transform.scale(), 1.0);
            assert!(sol.rms_residual < 1e-12);
        }
    }

    #[test]
    fn pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_points(&mut rng, 6);
        let shift = Point3::new(1.0, 2.0, 3.0);
        let q = p.iter().map(|x| *x + shift).collect();
        let sol = solve_horn(&CorrespondenceSet::new(p, q).unwrap(), FitMode::Rigid).unwrap();
        assert!(sol.transform.rotation.similarity(&UnitQuaternion::IDENTITY) > 1.0 - 1e-12);
        assert!(sol.transform.translation.distance(&shift) < 1e-12);
        assert!(sol.rms_residual < 1e-12);
    }

    #[test]
    fn recovers_random_rigid_and_agrees_with_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let truth = random_rigid(&mut rng);
        let p = random_points(&mut rng, 10);
        let c = CorrespondenceSet::new(p.clone(), mapped(&p, &truth)).unwrap();
        let horn = solve_horn(&c, FitMode::Rigid).unwrap();
        let svd = solve_svd_oracle(&c, FitMode::Rigid).unwrap();
        for sol in [&horn, &svd] {
            assert!(sol.transform.rotation.similarity(&truth.rotation) >= 1.0 - 1e-10);
            assert!(sol.transform.translation.distance(&truth.translation) < 1e-8);
        }
        assert!(horn.transform.rotation.similarity(&svd.transform.rotation) >= 1.0 - 1e-10);
        assert!((horn.rms_residual - svd.rms_residual).abs() < 1e-9);
    }

    #[test]
    fn similarity_scale_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_rigid(&mut rng);
        let truth = RigidTransform::with_scale(r.rotation, r.translation, 2.5).unwrap();
        let p = random_points(&mut rng, 12);
        let c = CorrespondenceSet::new(p.clone(), mapped(&p, &truth)).unwrap();
        let sol = solve_horn(&c, FitMode::Similarity).unwrap();
        assert!((sol.transform.scale() - 2.5).abs() < 1e-9);
        assert!(sol.rms_residual < 1e-10);
        let svd = solve_svd_oracle(&c, FitMode::Similarity).unwrap();
        assert!((svd.transform.scale() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn mirrored_point_still_gives_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_points(&mut rng, 5);
        let mut q: Vec<Point3> = p.iter().map(|x| Point3::new(-x.x, x.y, x.z)).collect();
        q[0] = p[0];
        let c = CorrespondenceSet::new(p, q).unwrap();
        for sol in [solve_svd_oracle(&c, FitMode::Rigid).unwrap(), solve_horn(&c, FitMode::Rigid).unwrap()] {
            let det = sol.transform.rotation_matrix().determinant();
            assert!((det - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let p = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(CorrespondenceSet::new(p.clone(), p), Err(Error::DegenerateInput(_))));
        let line: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        let good: Vec<Point3> = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
        ];
        assert!(matches!(CorrespondenceSet::new(line.clone(), good.clone()), Err(Error::DegenerateInput(_))));
        assert!(matches!(CorrespondenceSet::new(good, line), Err(Error::DegenerateInput(_))));
        let zeros = vec![Point3::ORIGIN; 4];
        assert!(matches!(CorrespondenceSet::new(zeros.clone(), zeros), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn coplanar_sets_are_accepted() {
        let p: Vec<Point3> = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 0.0, 0.0), Point3::new(0.0, 7.0, 0.0)];
        let t = RigidTransform::new(UnitQuaternion::from_axis_angle(Point3::new(1.0, 2.0, 3.0), 0.8), Point3::new(4.0, 5.0, 6.0));
        let c = CorrespondenceSet::new(p.clone(), mapped(&p, &t)).unwrap();
        let sol = solve_horn(&c, FitMode::Rigid).unwrap();
        assert!(sol.rms_residual < 1e-10);
        assert!(sol.transform.rotation.similarity(&t.rotation) >= 1.0 - 1e-10);
    }

    #[test]
    fn jacobi_handles_diagonal_and_zero() {
        let (vals, _) = jacobi_eigen(Matrix4::from_diagonal(&Vector4::new(3.0, -1.0, 2.0, 0.5))).unwrap();
        assert_eq!(vals, Vector4::new(3.0, -1.0, 2.0, 0.5));
        assert!(jacobi_eigen(Matrix4::zeros()).is_ok());
        let mut bad = Matrix4::identity();
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(jacobi_eigen(bad), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let b = Matrix4::from_fn(|_, _| rng.random_range(-10.0..10.0));
            let a = b + b.transpose();
            let (vals, vecs) = jacobi_eigen(a).unwrap();
            let rebuilt = vecs * Matrix4::from_diagonal(&vals) * vecs.transpose();
            assert!((rebuilt - a).amax() < 1e-11);
        }
    }

    fn noisy_instance(seed: u64, n: usize, sigma: f64) -> (CorrespondenceSet, RigidTransform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_rigid(&mut rng);
        let p = random_points(&mut rng, n);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let q = p
            .iter()
            .map(|x| {
                let e = if sigma > 0.0 {
                    Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    Point3::ORIGIN
                };
                truth.apply(*x) + e
            })
            .collect();
        (CorrespondenceSet::new(p, q).unwrap(), truth)
    }

    #[test]
    fn horn_is_a_local_minimum() {
        let (c, _) = noisy_instance(99, 15, 1.0);
        let sol = solve_horn(&c, FitMode::Rigid).unwrap();
        let base = c.cost(&sol.transform);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..100 {
            let axis = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let angle = rng.random_range(-1.0f64..1.0).to_radians();
            let dt = Point3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)) * (1.0 / 3f64.sqrt());
            let dr = UnitQuaternion::from_axis_angle(axis, angle);
            let perturbed = RigidTransform::new(dr.hamilton(&sol.transform.rotation), sol.transform.translation + dt);
            assert!(c.cost(&perturbed) >= base - 1e-9 * base.max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn left_isometry_equivariance(seed in 0u64..10_000, n in 3usize..30) {
            let (c, _) = noisy_instance(seed, n, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let g = random_rigid(&mut rng);
            let moved = CorrespondenceSet::new(c.source().to_vec(), mapped(c.target(), &g)).unwrap();
            let before = solve_horn(&c, FitMode::Rigid).unwrap().transform;
            let after = solve_horn(&moved, FitMode::Rigid).unwrap().transform;
            let expect = g.compose(&before);
            prop_assert!(after.rotation.similarity(&expect.rotation) >= 1.0 - 1e-9);
            prop_assert!(after.translation.distance(&expect.translation) < 1e-9);
        }

        #[test]
        fn similarity_scale_property(seed in 0u64..10_000, k in 0.1f64..10.0) {
            let (c, _) = noisy_instance(seed, 12, 0.5);
            let scaled = CorrespondenceSet::new(c.source().iter().map(|p| *p * k).collect(), c.target().to_vec()).unwrap();
            let a = solve_horn(&c, FitMode::Similarity).unwrap().transform;
            let b = solve_horn(&scaled, FitMode::Similarity).unwrap().transform;
            prop_assert!((b.scale() - a.scale() / k).abs() < 1e-9 * a.scale().max(1.0));
            prop_assert!(a.rotation.similarity(&b.rotation) >= 1.0 - 1e-9);
            prop_assert!(a.translation.distance(&b.translation) < 1e-9 * a.translation.norm().max(1.0));
        }

        #[test]
        fn exact_similarity_fit(seed in 0u64..10_000, n in 3usize..20, s in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rigid(&mut rng);
            let truth = RigidTransform::with_scale(r.rotation, r.translation, s).unwrap();
            let p = random_points(&mut rng, n);
            let c = CorrespondenceSet::new(p.clone(), mapped(&p, &truth)).unwrap();
            let sol = solve_horn(&c, FitMode::Similarity).unwrap();
            prop_assert!(sol.rms_residual < 1e-10);
        }
    }
}
