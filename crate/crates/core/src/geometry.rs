//! Rotation representations, rigid transforms, pinhole projection and 2D boxes.
//!
//! Conventions:
//! - quaternions are scalar-first `(w, x, y, z)` and stored in canonical sign
//!   (`w >= 0`, ties broken by the first nonzero vector component);
//! - image coordinates are continuous pixels with no half-pixel offset;
//! - a pose maps model points into the camera frame, `X = R p + t`, with
//!   `t = (x, y, d)` and `d` the depth along the optical axis.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{PoseError, Result};

/// Norm below which a quaternion cannot be normalized.
pub const MIN_QUAT_NORM: f64 = 1e-12;
/// Minimum depth for a point to be projected.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;
/// Slack on `1 + a.b` below which two directions count as antipodal.
pub const ANTIPODAL_EPS: f64 = 1e-9;
/// Orthonormality tolerance accepted by [`RotationMatrix::from_matrix`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Unit quaternion in canonical sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    /// Normalizes `(w, x, y, z)` and flips it into canonical sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_array([w, x, y, z])
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        let [w, x, y, z] = normalize_raw(q)?;
        Ok(Self::canonical(w, x, y, z))
    }

    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Rotation of `angle` radians about `axis` (any nonzero length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > MIN_QUAT_NORM) || !angle.is_finite() {
            return Err(PoseError::Degenerate(format!(
                "axis-angle with axis norm {n:e} and angle {angle}"
            )));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else {
            [x, y, z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        let s = if flip { -1.0 } else { 1.0 };
        // adding 0.0 turns any -0.0 into +0.0
        Self {
            w: s * w + 0.0,
            x: s * x + 0.0,
            y: s * y + 0.0,
            z: s * z + 0.0,
        }
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conjugate(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        RotationMatrix(raw_quat_matrix(self.to_array()))
    }

    /// Angle in radians of the relative rotation between `self` and `other`.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let dot = self
            .to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .abs()
            .min(1.0);
        2.0 * dot.acos()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product; `(a * b)` rotates by `b` first, then `a`.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        // the product of unit quaternions is unit up to rounding
        Quaternion::new(w, x, y, z).expect("product of unit quaternions is nonzero")
    }
}

fn normalize_raw(q: [f64; 4]) -> Result<[f64; 4]> {
    if q.iter().any(|c| !c.is_finite()) {
        return Err(PoseError::Validation(format!(
            "quaternion has non-finite component: {q:?}"
        )));
    }
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n < MIN_QUAT_NORM {
        return Err(PoseError::Degenerate(format!(
            "quaternion norm {n:e} is below {MIN_QUAT_NORM:e}"
        )));
    }
    Ok(q.map(|c| c / n))
}

/// Rotation matrix of a unit quaternion given as raw components.
///
/// Only products of component pairs appear, so `q` and `-q` give bitwise
/// identical matrices.
pub(crate) fn raw_quat_matrix([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// Converts a (not necessarily unit) quaternion `(w, x, y, z)` to a rotation matrix.
pub fn quat_to_matrix(q: [f64; 4]) -> Result<RotationMatrix> {
    Ok(RotationMatrix(raw_quat_matrix(normalize_raw(q)?)))
}

/// Converts a rotation matrix to its canonical-sign quaternion.
pub fn matrix_to_quat(r: &RotationMatrix) -> Quaternion {
    let m = &r.0;
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    // Shepperd: pivot on the largest of the four squared components
    let q = if trace >= m[(0, 0)] && trace >= m[(1, 1)] && trace >= m[(2, 2)] {
        let s = 2.0 * (1.0 + trace).sqrt();
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    Quaternion::from_array(q).expect("pivot component is at least 1/2")
}

/// A 3x3 proper orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality (`|R^T R - I|` and `|det R - 1|` within
    /// [`ORTHONORMAL_TOL`]).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(PoseError::Validation("rotation has non-finite entry".into()));
        }
        let err = orthonormality_error(&m);
        if err > ORTHONORMAL_TOL {
            return Err(PoseError::Validation(format!(
                "matrix is not a rotation (orthonormality error {err:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// `max(max |R^T R - I|, |det R - 1|)`.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    gram.amax().max((m.determinant() - 1.0).abs())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation taking unit vector `a` onto unit vector `b` about the axis `a x b`.
///
/// `R = I + [v]x + [v]x^2 / (1 + a.b)` with `v = a x b`.
pub fn rodrigues_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<RotationMatrix> {
    for (name, u) in [("a", a), ("b", b)] {
        let n = u.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(PoseError::Validation(format!(
                "{name} must be a unit vector (norm {n})"
            )));
        }
    }
    let c = a.dot(b);
    if c <= -1.0 + ANTIPODAL_EPS {
        return Err(PoseError::Singular(format!(
            "vectors are antipodal (a.b = {c}); rotation axis undefined"
        )));
    }
    let k = skew(&a.cross(b));
    Ok(RotationMatrix(Matrix3::identity() + k + k * k / (1.0 + c)))
}

/// Rigid transform `X = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::identity(), Vector3::zeros())
    }

    pub fn depth(&self) -> f64 {
        self.translation.z
    }

    pub fn rotation_matrix(&self) -> RotationMatrix {
        self.rotation.to_matrix()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation_matrix().apply(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.conjugate();
        Pose::new(r_inv, -(r_inv.to_matrix().apply(&self.translation)))
    }

    /// Homogeneous 4x4 form `[R t; 0 1]`.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().apply(p) + self.translation
    }
}

pub fn transform_points(pose: &Pose, pts: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    if let Some(i) = pts.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(PoseError::Validation(format!("point {i} is not finite")));
    }
    let r = pose.rotation_matrix();
    Ok(pts.iter().map(|p| r.apply(p) + pose.translation).collect())
}

/// Pinhole intrinsics `K = [fx 0 px; 0 fy py; 0 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        let k = Self { fx, fy, px, py };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(PoseError::Validation(format!(
                "focal lengths must be positive and finite (fx {}, fy {})",
                self.fx, self.fy
            )));
        }
        if !(self.px.is_finite() && self.py.is_finite()) {
            return Err(PoseError::Validation("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.px, 0.0, self.fy, self.py, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.px / self.fx,
            0.0,
            1.0 / self.fy,
            -self.py / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ray `K^-1 (u, v, 1)` with third component 1.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.px) / self.fx,
            (pixel.y - self.py) / self.fy,
            1.0,
        )
    }

    /// Projects a camera-frame point; `None` if it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z > MIN_PROJECTION_DEPTH {
            Some(Vector2::new(
                self.fx * p.x / p.z + self.px,
                self.fy * p.y / p.z + self.py,
            ))
        } else {
            None
        }
    }
}

/// Projects model points through `pose` and `k`.
pub fn project_points(
    k: &CameraIntrinsics,
    pose: &Pose,
    pts: &[Vector3<f64>],
) -> Result<Vec<Vector2<f64>>> {
    k.validate()?;
    transform_points(pose, pts)?
        .iter()
        .enumerate()
        .map(|(index, x)| {
            k.project(x)
                .ok_or(PoseError::Projection { index, depth: x.z })
        })
        .collect()
}

/// Axis-aligned rectangle, top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let r = Self { x, y, w, h };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(PoseError::Validation("rectangle has non-finite field".into()));
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(PoseError::Validation(format!(
                "rectangle extent must be positive (w {}, h {})",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Tightest axis-aligned rectangle containing every point.
pub fn bbox2d_of(pts: &[Vector2<f64>]) -> Result<Rect2D> {
    let first = pts
        .first()
        .ok_or_else(|| PoseError::Validation("bounding box of an empty point set".into()))?;
    let (mut lo, mut hi) = (*first, *first);
    for p in pts {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(PoseError::Validation("non-finite 2D point".into()));
        }
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let (width, height) = (hi.x - lo.x, hi.y - lo.y);
    if !(width > 0.0 && height > 0.0) {
        return Err(PoseError::DegenerateBox { width, height });
    }
    Ok(Rect2D {
        x: lo.x,
        y: lo.y,
        w: width,
        h: height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_quats(n: usize) -> Vec<Quaternion> {
        let mut rng = crate::synth::SplitMix64::new(11);
        (0..n).map(|_| rng.uniform_rotation()).collect()
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_matrix([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_x() {
        let r = quat_to_matrix([0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(*r.matrix(), Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)));
        let q = matrix_to_quat(&r);
        assert_eq!(q.to_array(), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(matrix_to_quat(&RotationMatrix::identity()).to_array(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_quaternion_is_degenerate() {
        assert!(matches!(
            quat_to_matrix([0.0, 0.0, 0.0, 1e-13]),
            Err(PoseError::Degenerate(_))
        ));
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn canonical_sign() {
        let q = Quaternion::new(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(q.w() > 0.0);
        let q = Quaternion::new(0.0, 0.0, -1.0, 0.0).unwrap();
        assert_eq!(q.to_array(), [0.0, 0.0, 1.0, 0.0]);
        let q = Quaternion::new(-0.0, -0.0, 0.0, -2.0).unwrap();
        assert_eq!(q.to_array(), [0.0, 0.0, 0.0, 1.0]);
        assert!(q.w().is_sign_positive());
    }

    #[test]
    fn random_rotations_are_orthonormal_and_round_trip() {
        for q in random_quats(1000) {
            let r = q.to_matrix();
            assert!(orthonormality_error(r.matrix()) < 1e-12);
            let back = matrix_to_quat(&r);
            let diff = back.to_matrix().matrix() - r.matrix();
            assert!(diff.amax() < 1e-10, "{diff}");
            assert!(back.w() >= 0.0);
        }
    }

    #[test]
    fn double_cover_is_exact() {
        for q in random_quats(200) {
            let a = q.to_array();
            let neg = a.map(|c| -c);
            assert_eq!(quat_to_matrix(a).unwrap(), quat_to_matrix(neg).unwrap());
        }
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RotationMatrix::from_matrix(m).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RotationMatrix::from_matrix(reflection).is_err());
    }

    #[test]
    fn rodrigues_cases() {
        let z = Vector3::z();
        assert_eq!(*rodrigues_between(&z, &z).unwrap().matrix(), Matrix3::identity());

        let b = Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        let r = rodrigues_between(&z, &b).unwrap();
        assert!((r.apply(&z) - b).amax() < 1e-10);
        assert!(orthonormality_error(r.matrix()) < 1e-10);

        assert!(matches!(
            rodrigues_between(&z, &-z),
            Err(PoseError::Singular(_))
        ));
        assert!(rodrigues_between(&Vector3::new(0.0, 0.0, 2.0), &z).is_err());
    }

    #[test]
    fn rodrigues_is_inverted_by_swapping_arguments() {
        let mut rng = crate::synth::SplitMix64::new(5);
        for _ in 0..500 {
            let a = rng.unit_vector();
            let b = rng.unit_vector();
            if a.dot(&b) < -0.999 {
                continue;
            }
            let ab = rodrigues_between(&a, &b).unwrap();
            let ba = rodrigues_between(&b, &a).unwrap();
            assert!((ab.apply(&a) - b).amax() < 1e-10);
            assert!(((ab * ba).matrix() - Matrix3::identity()).amax() < 1e-10);
        }
    }

    #[test]
    fn transform_identity_and_translation() {
        let pts = vec![Vector3::new(1.0, -2.0, 3.0), Vector3::new(0.5, 0.25, -1.0)];
        assert_eq!(transform_points(&Pose::identity(), &pts).unwrap(), pts);
        let t = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(
            transform_points(&t, &[Vector3::zeros()]).unwrap(),
            vec![Vector3::new(0.0, 0.0, 1.0)]
        );
        assert!(transform_points(&t, &[Vector3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = crate::synth::SplitMix64::new(21);
        for _ in 0..200 {
            let t1 = Pose::new(rng.uniform_rotation(), rng.unit_vector() * 2.0);
            let t2 = Pose::new(rng.uniform_rotation(), rng.unit_vector() * 3.0);
            let p = rng.unit_vector();
            let seq = t1.transform_point(&t2.transform_point(&p));
            let composed = t1.compose(&t2).transform_point(&p);
            assert!((seq - composed).amax() < 1e-12, "{}", (seq - composed).amax());
            let back = t1.inverse().transform_point(&t1.transform_point(&p));
            assert!((back - p).amax() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_form_matches_transform() {
        let mut rng = crate::synth::SplitMix64::new(3);
        let pose = Pose::new(rng.uniform_rotation(), Vector3::new(0.1, -0.2, 2.0));
        let p = Vector3::new(0.3, 0.4, -0.5);
        let h = pose.to_homogeneous() * p.push(1.0);
        assert!((h.xyz() - pose.transform_point(&p)).amax() < 1e-15);
    }

    #[test]
    fn principal_ray_projection() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let uv = project_points(
            &k,
            &Pose::identity(),
            &[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.0, 1.0)],
        )
        .unwrap();
        assert_eq!(uv[0], Vector2::new(320.0, 240.0));
        assert_relative_eq!(uv[1].x, 370.0, epsilon = 1e-12);
        assert_eq!(uv[1].y, 240.0);
    }

    #[test]
    fn projection_error_names_index() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let err = project_points(
            &k,
            &Pose::identity(),
            &[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 0.0)],
        )
        .unwrap_err();
        assert_eq!(err, PoseError::Projection { index: 1, depth: 0.0 });
    }

    #[test]
    fn cube_corners_match_matrix_oracle() {
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
        let pose = Pose::new(
            Quaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.4).unwrap(),
            Vector3::new(0.2, -0.1, 3.0),
        );
        let corners = crate::synth::cube_corners(1.0);
        let got = project_points(&k, &pose, &corners).unwrap();
        // oracle: K [R | t] X in homogeneous coordinates
        let proj = k.matrix() * pose.to_homogeneous().fixed_view::<3, 4>(0, 0);
        for (p, uv) in corners.iter().zip(&got) {
            let h = proj * p.push(1.0);
            assert!((h.xy() / h.z - uv).amax() < 1e-10);
        }
        let bb = bbox2d_of(&got).unwrap();
        assert!(bb.w > 0.0 && bb.h > 0.0);
    }

    #[test]
    fn back_projection_is_parallel() {
        let k = CameraIntrinsics::new(610.0, 590.0, 300.0, 250.0).unwrap();
        let mut rng = crate::synth::SplitMix64::new(8);
        for _ in 0..200 {
            let p = Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.5, 5.0));
            let uv = k.project(&p).unwrap();
            let ray = k.inverse_matrix() * uv.push(1.0);
            assert!(ray.normalize().cross(&p.normalize()).norm() < 1e-10);
        }
    }

    #[test]
    fn bbox_cases() {
        let b = bbox2d_of(&[Vector2::new(0.0, 0.0), Vector2::new(2.0, 3.0)]).unwrap();
        assert_eq!(b, Rect2D { x: 0.0, y: 0.0, w: 2.0, h: 3.0 });
        assert!(matches!(
            bbox2d_of(&[Vector2::new(1.0, 1.0), Vector2::new(1.0, 1.0)]),
            Err(PoseError::DegenerateBox { .. })
        ));
        assert!(matches!(bbox2d_of(&[]), Err(PoseError::Validation(_))));
    }

    #[test]
    fn bbox_matches_min_max_scan() {
        let mut rng = crate::synth::SplitMix64::new(99);
        for n in 2..40 {
            let pts: Vec<_> = (0..n)
                .map(|_| Vector2::new(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0)))
                .collect();
            let b = bbox2d_of(&pts).unwrap();
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in &pts {
                x0 = x0.min(p.x);
                y0 = y0.min(p.y);
                x1 = x1.max(p.x);
                y1 = y1.max(p.y);
            }
            assert_eq!((b.x, b.y, b.w, b.h), (x0, y0, x1 - x0, y1 - y0));
        }
    }

    #[test]
    fn invalid_intrinsics_and_rects() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(Rect2D::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Rect2D::new(0.0, 0.0, 1.0, f64::NAN).is_err());
    }
}
