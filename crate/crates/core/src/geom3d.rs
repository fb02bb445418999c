//! Rigid and similarity transforms over 3D points.
//!
//! Rotations are stored as unit quaternions with a canonical sign so that two
//! transforms describing the same mapping compare equal field by field.
//! Matrices are only ever derived views.

use nalgebra::{Matrix3, Matrix4, Vector3};
use std::ops::{Add, Mul, Neg, Sub};

/// A point (or free vector) in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, o: &Point3) -> f64 {
        (*self - *o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Component-wise absolute value.
    pub fn abs(&self) -> Point3 {
        Point3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Unit quaternion `w + xi + yj + zk`, kept normalized with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes `(w, x, y, z)` and flips it into the canonical hemisphere.
    ///
    /// Returns `None` for a zero or non-finite input.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        // Leave already-unit input untouched so normalization is idempotent
        // and stored quaternions reload bit-for-bit.
        let n = if (n - 1.0).abs() <= 4.0 * f64::EPSILON { 1.0 } else { n };
        let (mut w, mut x, mut y, mut z) = (w / n, x / n, y / n, z / n);
        if Self::needs_flip(w, x, y, z) {
            w = -w;
            x = -x;
            y = -y;
            z = -z;
        }
        // -0.0 and 0.0 must compare equal field by field
        Some(Self { w: w + 0.0, x: x + 0.0, y: y + 0.0, z: z + 0.0 })
    }

    /// Panicking variant of [`UnitQuaternion::try_new`].
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_new(w, x, y, z).expect("quaternion must be finite and non-zero")
    }

    fn needs_flip(w: f64, x: f64, y: f64, z: f64) -> bool {
        for c in [w, x, y, z] {
            if c != 0.0 {
                return c < 0.0;
            }
        }
        false
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis * (1.0 / n);
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation vector (axis scaled by angle) to quaternion.
    pub fn from_rotation_vector(v: Point3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// `[w, x, y, z]`.
    pub fn coords(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * o`.
    pub fn hamilton(&self, o: &UnitQuaternion) -> Self {
        let (a, b) = (self, o);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, p: Point3) -> Point3 {
        // v' = v + 2w (u × v) + 2 u × (u × v)
        let u = Point3::new(self.x, self.y, self.z);
        let uv = u.cross(&p);
        let uuv = u.cross(&uv);
        p + uv * (2.0 * self.w) + uuv * 2.0
    }

    /// Absolute value of the 4D dot product; 1 means identical rotations.
    pub fn similarity(&self, o: &UnitQuaternion) -> f64 {
        (self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z).abs()
    }

    /// Rotation angle in `[0, π]` between two rotations.
    pub fn angle_to(&self, o: &UnitQuaternion) -> f64 {
        let d = self.conjugate().hamilton(o);
        let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * v.atan2(d.w.abs())
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion of a proper rotation matrix (Shepperd's branch selection).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, o: UnitQuaternion) -> UnitQuaternion {
        self.hamilton(&o)
    }
}

/// `p ↦ scale · R · p + translation`.
///
/// Naming follows the frames it connects: a transform called `t_mc` maps
/// marker coordinates into camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Point3,
    scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: UnitQuaternion::IDENTITY,
        translation: Point3::ORIGIN,
        scale: 1.0,
    };

    pub fn new(rotation: UnitQuaternion, translation: Point3) -> Self {
        Self { rotation, translation, scale: 1.0 }
    }

    /// Similarity transform. Returns `None` unless `scale` is finite and positive.
    pub fn with_scale(rotation: UnitQuaternion, translation: Point3, scale: f64) -> Option<Self> {
        (scale.is_finite() && scale > 0.0).then_some(Self { rotation, translation, scale })
    }

    pub fn from_translation(t: Point3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn from_rotation(r: UnitQuaternion) -> Self {
        Self::new(r, Point3::ORIGIN)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_rigid(&self) -> bool {
        self.scale == 1.0
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.hamilton(&other.rotation),
            translation: self.rotation.rotate(other.translation) * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.conjugate();
        let s = 1.0 / self.scale;
        RigidTransform { rotation: r, translation: -(r.rotate(self.translation) * s), scale: s }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    /// Homogeneous 4×4 view `[sR t; 0 1]`.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        let sr = self.rotation.to_matrix() * self.scale;
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&sr);
        h[(0, 3)] = self.translation.x;
        h[(1, 3)] = self.translation.y;
        h[(2, 3)] = self.translation.z;
        h
    }

    /// Rotation angle (rad) and translation distance (mm) separating two transforms.
    pub fn pose_error(&self, o: &RigidTransform) -> (f64, f64) {
        (self.rotation.angle_to(&o.rotation), self.translation.distance(&o.translation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    // Independent construction of a rotation matrix (Rodrigues' formula).
    fn rodrigues(axis: Point3, angle: f64) -> Matrix3<f64> {
        let a = axis.to_vector().normalize();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
    }

    fn random_transform(rng: &mut ChaCha8Rng, with_scale: bool) -> (RigidTransform, Matrix4<f64>) {
        let axis = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(-3.0..3.0);
        let t = Point3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let s = if with_scale { rng.random_range(0.2..5.0) } else { 1.0 };
        let tf = RigidTransform::with_scale(UnitQuaternion::from_axis_angle(axis, angle), t, s).unwrap();
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rodrigues(axis, angle) * s));
        h[(0, 3)] = t.x;
        h[(1, 3)] = t.y;
        h[(2, 3)] = t.z;
        (tf, h)
    }

    fn apply_h(h: &Matrix4<f64>, p: Point3) -> Point3 {
        let v = h * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
        Point3::new(v.x / v.w, v.y / v.w, v.z / v.w)
    }

    fn assert_close(a: Point3, b: Point3, tol: f64) {
        assert!(a.distance(&b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn apply_examples() {
        assert_eq!(RigidTransform::IDENTITY.apply(Point3::new(1.0, 2.0, 3.0)), Point3::new(1.0, 2.0, 3.0));
        let rz = RigidTransform::from_rotation(UnitQuaternion::from_axis_angle(Point3::new(0.0, 0.0, 1.0), FRAC_PI_2));
        assert_close(rz.apply(Point3::new(1.0, 0.0, 0.0)), Point3::new(0.0, 1.0, 0.0), 1e-12);
        let t = RigidTransform::with_scale(UnitQuaternion::IDENTITY, Point3::new(1.0, 0.0, 0.0), 2.0).unwrap();
        assert_eq!(t.apply(Point3::new(3.0, 0.0, 0.0)), Point3::new(7.0, 0.0, 0.0));
    }

    #[test]
    fn compose_and_inverse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, _) = random_transform(&mut rng, true);
        assert_eq!(RigidTransform::IDENTITY.compose(&t), t);
        let id = t.compose(&t.inverse());
        assert!(id.rotation.similarity(&UnitQuaternion::IDENTITY) > 1.0 - 1e-12);
        assert!(id.translation.norm() < 1e-10);
        assert!((id.scale() - 1.0).abs() < 1e-12);

        assert_eq!(RigidTransform::IDENTITY.inverse(), RigidTransform::IDENTITY);
        let inv = RigidTransform::from_translation(Point3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(inv, RigidTransform::from_translation(Point3::new(-1.0, -2.0, -3.0)));
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, ha) = random_transform(&mut rng, true);
            let (b, hb) = random_transform(&mut rng, true);
            let c = a.compose(&b);
            let hc = ha * hb;
            assert!((c.scale() - a.scale() * b.scale()).abs() < 1e-12);
            for _ in 0..5 {
                let p = Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
                assert_close(c.apply(p), apply_h(&hc, p), 1e-10);
                assert_close(c.apply(p), a.apply(b.apply(p)), 1e-10);
            }
        }
    }

    #[test]
    fn inverse_matches_matrix_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (t, h) = random_transform(&mut rng, true);
            let hi = h.try_inverse().unwrap();
            let ti = t.inverse();
            assert!((ti.scale() - 1.0 / t.scale()).abs() < 1e-12);
            let p = Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            assert_close(ti.apply(p), apply_h(&hi, p), 1e-10);
        }
    }

    #[test]
    fn canonical_sign() {
        let q = UnitQuaternion::new(-0.5, 0.5, -0.5, 0.5);
        assert!(q.w() > 0.0);
        assert_eq!(q, UnitQuaternion::new(0.5, -0.5, 0.5, -0.5));
        let tie = UnitQuaternion::new(0.0, -1.0, 0.0, 0.0);
        assert_eq!(tie.coords(), [0.0, 1.0, 0.0, 0.0]);
        assert!(UnitQuaternion::try_new(0.0, 0.0, 0.0, 0.0).is_none());
        assert!(RigidTransform::with_scale(UnitQuaternion::IDENTITY, Point3::ORIGIN, 0.0).is_none());
    }

    #[test]
    fn matrix_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (t, _) = random_transform(&mut rng, false);
            let r = t.rotation_matrix();
            let e = r.transpose() * r - Matrix3::identity();
            assert!(e.amax() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::new(w, x, y, z))
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    fn arb_rigid() -> impl Strategy<Value = RigidTransform> {
        (arb_quat(), arb_point()).prop_map(|(q, t)| RigidTransform::new(q, t))
    }

    proptest! {
        #[test]
        fn quaternion_matrix_round_trip(q in arb_quat()) {
            let m = q.to_matrix();
            let back = UnitQuaternion::from_matrix(&m);
            prop_assert!((back.to_matrix() - m).amax() < 1e-10);
            let c = back.coords();
            prop_assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn negated_quaternion_is_equal(q in arb_quat()) {
            let [w, x, y, z] = q.coords();
            prop_assert_eq!(UnitQuaternion::new(-w, -x, -y, -z), q);
        }

        #[test]
        fn rigid_apply_preserves_distance(t in arb_rigid(), p in arb_point(), q in arb_point()) {
            let d = t.apply(p).distance(&t.apply(q)) - p.distance(&q);
            prop_assert!(d.abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_rigid(), b in arb_rigid(), c in arb_rigid(), p in arb_point()) {
            let l = a.compose(&b).compose(&c).apply(p);
            let r = a.compose(&b.compose(&c)).apply(p);
            prop_assert!(l.distance(&r) < 1e-9);
        }
    }
}
