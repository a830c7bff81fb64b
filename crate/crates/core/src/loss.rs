//! Smooth-L1 loss on transformed model coordinates and a gradient-descent
//! pose refiner that minimizes it.
//!
//! The loss compares `T_pred(p)` with `T_label(p)` for every model point,
//! either as 3D camera-frame coordinates or as projected 2D coordinates, and
//! averages the smooth-L1 kernel over all scalar coordinates.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::attention::relative_error;
use crate::error::{PoseError, Result};
use crate::geometry::{raw_quat_matrix, CameraIntrinsics, Pose, Quaternion, MIN_PROJECTION_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    #[default]
    Coords3d,
    Coords2d,
}

impl LossMode {
    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Coords3d => "coords3d",
            LossMode::Coords2d => "coords2d",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = PoseError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coords3d" => Ok(LossMode::Coords3d),
            "coords2d" => Ok(LossMode::Coords2d),
            other => Err(PoseError::Validation(format!(
                "unknown loss mode '{other}' (expected coords3d or coords2d)"
            ))),
        }
    }
}

fn kernel(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn kernel_slope(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

/// Mean smooth-L1 kernel of `a - b`.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PoseError::Validation(format!(
            "length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(PoseError::Validation("smooth L1 of empty sequences".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| kernel(x - y)).sum::<f64>() / a.len() as f64)
}

/// Coordinates compared by the loss, flattened point by point.
fn coordinates(
    pose: &Pose,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: Option<&CameraIntrinsics>,
) -> Result<Vec<f64>> {
    let r = pose.rotation_matrix();
    let mut out = Vec::with_capacity(pts.len() * 3);
    for (index, p) in pts.iter().enumerate() {
        let x = r.apply(p) + pose.translation;
        match mode {
            LossMode::Coords3d => out.extend_from_slice(x.as_slice()),
            LossMode::Coords2d => {
                let k = k.expect("checked by validate_inputs");
                let uv = k.project(&x).ok_or(PoseError::Projection { index, depth: x.z })?;
                out.extend_from_slice(uv.as_slice());
            }
        }
    }
    Ok(out)
}

fn validate_inputs(pts: &[Vector3<f64>], mode: LossMode, k: Option<&CameraIntrinsics>) -> Result<()> {
    if pts.is_empty() {
        return Err(PoseError::Validation("loss needs at least one model point".into()));
    }
    if mode == LossMode::Coords2d {
        k.ok_or_else(|| PoseError::Validation("coords2d mode needs camera intrinsics".into()))?
            .validate()?;
    }
    Ok(())
}

pub fn coord_loss(
    pred: &Pose,
    label: &Pose,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: Option<&CameraIntrinsics>,
) -> Result<f64> {
    validate_inputs(pts, mode, k)?;
    smooth_l1(&coordinates(pred, pts, mode, k)?, &coordinates(label, pts, mode, k)?)
}

/// Per-coordinate differences `T_pred(p) - T_label(p)`, flattened.
pub fn coord_residuals(
    pred: &Pose,
    label: &Pose,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: Option<&CameraIntrinsics>,
) -> Result<Vec<f64>> {
    validate_inputs(pts, mode, k)?;
    let a = coordinates(pred, pts, mode, k)?;
    let b = coordinates(label, pts, mode, k)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Gradient of [`coord_loss`] in the predicted pose parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGradient {
    /// With respect to the raw quaternion `(w, x, y, z)`, taken through the
    /// normalization, so it is orthogonal to the quaternion itself.
    pub d_quat: Vector4<f64>,
    pub d_translation: Vector3<f64>,
}

impl PoseGradient {
    pub fn norm(&self) -> f64 {
        (self.d_quat.norm_squared() + self.d_translation.norm_squared()).sqrt()
    }
}

/// `dR/dq_c` for each quaternion component, evaluated at unit `q`.
fn rotation_partials([w, x, y, z]: [f64; 4]) -> [Matrix3<f64>; 4] {
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

pub fn coord_loss_grad(
    pred: &Pose,
    label: &Pose,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: Option<&CameraIntrinsics>,
) -> Result<PoseGradient> {
    validate_inputs(pts, mode, k)?;
    let target = coordinates(label, pts, mode, k)?;
    let q = pred.rotation.to_array();
    let r = raw_quat_matrix(q);
    let dims = match mode {
        LossMode::Coords3d => 3,
        LossMode::Coords2d => 2,
    };
    let scale = 1.0 / (dims * pts.len()) as f64;

    // accumulate dL/dX per point into d_t and the outer product sum g p^T
    let mut d_t = Vector3::zeros();
    let mut g_pt = Matrix3::zeros();
    for (index, p) in pts.iter().enumerate() {
        let x = r * p + pred.translation;
        let g = match mode {
            LossMode::Coords3d => Vector3::from_fn(|c, _| kernel_slope(x[c] - target[3 * index + c]) * scale),
            LossMode::Coords2d => {
                let k = k.expect("checked by validate_inputs");
                if x.z <= MIN_PROJECTION_DEPTH {
                    return Err(PoseError::Projection { index, depth: x.z });
                }
                let u = k.fx * x.x / x.z + k.px;
                let v = k.fy * x.y / x.z + k.py;
                let gu = kernel_slope(u - target[2 * index]) * scale;
                let gv = kernel_slope(v - target[2 * index + 1]) * scale;
                Vector3::new(
                    gu * k.fx / x.z,
                    gv * k.fy / x.z,
                    -(gu * k.fx * x.x + gv * k.fy * x.y) / (x.z * x.z),
                )
            }
        };
        d_t += g;
        g_pt += g * p.transpose();
    }
    let partials = rotation_partials(q);
    let d_unit = Vector4::from_fn(|c, _| partials[c].component_mul(&g_pt).sum());
    // project out the radial direction: d/dq of q/|q| at |q| = 1
    let qv = Vector4::from(q);
    let d_quat = d_unit - qv * qv.dot(&d_unit);
    Ok(PoseGradient {
        d_quat,
        d_translation: d_t,
    })
}

/// Largest relative error between [`coord_loss_grad`] and central
/// differences over the 4 raw quaternion and 3 translation components.
pub fn coord_loss_grad_check(
    pred: &Pose,
    label: &Pose,
    pts: &[Vector3<f64>],
    mode: LossMode,
    k: Option<&CameraIntrinsics>,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(PoseError::Validation(format!("invalid finite-difference step {step}")));
    }
    let g = coord_loss_grad(pred, label, pts, mode, k)?;
    let q = pred.rotation.to_array();
    let loss_at = |q: [f64; 4], t: Vector3<f64>| {
        coord_loss(&Pose::new(Quaternion::from_array(q)?, t), label, pts, mode, k)
    };
    let mut worst = 0.0f64;
    for c in 0..4 {
        let (mut up, mut down) = (q, q);
        up[c] += step;
        down[c] -= step;
        let numeric = (loss_at(up, pred.translation)? - loss_at(down, pred.translation)?) / (2.0 * step);
        worst = worst.max(relative_error(g.d_quat[c], numeric));
    }
    for c in 0..3 {
        let (mut up, mut down) = (pred.translation, pred.translation);
        up[c] += step;
        down[c] -= step;
        let numeric = (loss_at(q, up)? - loss_at(q, down)?) / (2.0 * step);
        worst = worst.max(relative_error(g.d_translation[c], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub step0: f64,
    pub backtrack: f64,
    pub grad_tol: f64,
    pub mode: LossMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step0: 1e-2,
            backtrack: 0.5,
            grad_tol: 1e-10,
            mode: LossMode::Coords3d,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(PoseError::Validation("max_iters must be positive".into()));
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(PoseError::Validation(format!("step0 must be positive (got {})", self.step0)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(PoseError::Validation(format!(
                "backtrack factor must lie in (0, 1) (got {})",
                self.backtrack
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(PoseError::Validation("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    NoDescent,
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "gradient_tolerance",
            StopReason::MaxIterations => "max_iterations",
            StopReason::NoDescent => "no_descent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub pose: Pose,
    pub loss: f64,
    pub iterations: usize,
    /// Loss before the first step and after every accepted step.
    pub loss_trace: Vec<f64>,
    /// True when the gradient norm fell below `grad_tol`.
    pub converged: bool,
    pub stop_reason: StopReason,
}

/// Sufficient-decrease constant of the Armijo test.
const ARMIJO_C: f64 = 1e-4;
/// Line search gives up once the step shrinks below this.
const MIN_STEP: f64 = 1e-20;

fn step_pose(pose: &Pose, g: &PoseGradient, alpha: f64) -> Option<Pose> {
    let q = Vector4::from(pose.rotation.to_array()) - g.d_quat * alpha;
    let rotation = Quaternion::from_array(q.into()).ok()?;
    Some(Pose::new(rotation, pose.translation - g.d_translation * alpha))
}

/// Gradient descent on `(q, t)` with a backtracking Armijo line search.
///
/// The trial step starts at `step0`, shrinks by `backtrack` until the loss
/// decreases sufficiently, and grows by `1 / backtrack` after every accepted
/// step. The quaternion is renormalized after each update.
pub fn refine_pose(
    init: &Pose,
    label: &Pose,
    pts: &[Vector3<f64>],
    cfg: &RefineConfig,
    k: Option<&CameraIntrinsics>,
) -> Result<RefineReport> {
    cfg.validate()?;
    let loss_of = |p: &Pose| coord_loss(p, label, pts, cfg.mode, k);

    let mut pose = *init;
    let mut loss = loss_of(&pose)?;
    let mut trace = vec![loss];
    let mut alpha = cfg.step0;
    let mut iterations = 0;
    let stop_reason = loop {
        let g = coord_loss_grad(&pose, label, pts, cfg.mode, k)?;
        let gnorm2 = g.norm().powi(2);
        if g.norm() <= cfg.grad_tol || loss == 0.0 {
            break StopReason::GradientTolerance;
        }
        if iterations == cfg.max_iters {
            break StopReason::MaxIterations;
        }
        let mut accepted = None;
        while alpha >= MIN_STEP {
            if let Some(trial) = step_pose(&pose, &g, alpha) {
                // a point pushed behind the camera counts as a rejected step
                if let Ok(l) = loss_of(&trial) {
                    if l < loss && l <= loss - ARMIJO_C * alpha * gnorm2 {
                        accepted = Some((trial, l));
                        break;
                    }
                }
            }
            alpha *= cfg.backtrack;
        }
        let Some((next, l)) = accepted else {
            break StopReason::NoDescent;
        };
        pose = next;
        loss = l;
        trace.push(l);
        iterations += 1;
        alpha /= cfg.backtrack;
    };
    Ok(RefineReport {
        pose,
        loss,
        iterations,
        loss_trace: trace,
        converged: stop_reason == StopReason::GradientTolerance,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{add, ModelPoints};
    use crate::synth::{cube_corners, SplitMix64};
    use approx::assert_relative_eq;

    fn k_norm() -> CameraIntrinsics {
        CameraIntrinsics::new(8.0, 8.0, 0.5, 0.5).unwrap()
    }

    #[test]
    fn smooth_l1_kernel_values() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[-2.0, 0.0], &[0.0, 0.5]).unwrap(), (1.5 + 0.125) / 2.0);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0]).is_err());
        assert!(smooth_l1(&[], &[]).is_err());
    }

    #[test]
    fn translation_error_loss() {
        let label = Pose::new(Quaternion::new(0.9, 0.2, 0.1, 0.3).unwrap(), Vector3::new(0.0, 0.0, 3.0));
        let pred = Pose::new(label.rotation, label.translation + Vector3::new(0.5, 0.0, 0.0));
        let l = coord_loss(&pred, &label, &cube_corners(1.0), LossMode::Coords3d, None).unwrap();
        assert_relative_eq!(l, 0.125 / 3.0, epsilon = 1e-15);
        assert_eq!(coord_loss(&label, &label, &cube_corners(1.0), LossMode::Coords3d, None).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_homogeneous_oracle() {
        let mut rng = SplitMix64::new(10);
        let pts = cube_corners(0.4);
        for _ in 0..200 {
            let a = Pose::new(rng.uniform_rotation(), Vector3::new(0.1, 0.0, 2.0) + rng.unit_vector() * 0.3);
            let b = Pose::new(rng.uniform_rotation(), Vector3::new(0.0, 0.1, 2.0) + rng.unit_vector() * 0.3);
            let (ha, hb) = (a.to_homogeneous(), b.to_homogeneous());
            let mut sum3 = 0.0;
            let mut sum2 = 0.0;
            let k = k_norm();
            for p in &pts {
                let (xa, xb) = (ha * p.push(1.0), hb * p.push(1.0));
                for c in 0..3 {
                    sum3 += kernel(xa[c] - xb[c]);
                }
                let pa = k.matrix() * xa.xyz();
                let pb = k.matrix() * xb.xyz();
                sum2 += kernel(pa.x / pa.z - pb.x / pb.z) + kernel(pa.y / pa.z - pb.y / pb.z);
            }
            let l3 = coord_loss(&a, &b, &pts, LossMode::Coords3d, None).unwrap();
            let l2 = coord_loss(&a, &b, &pts, LossMode::Coords2d, Some(&k)).unwrap();
            assert!((l3 - sum3 / 24.0).abs() < 1e-12);
            assert!((l2 - sum2 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_flip_invariance() {
        let mut rng = SplitMix64::new(12);
        let pts = cube_corners(1.0);
        for _ in 0..50 {
            let q = rng.uniform_rotation().to_array();
            let neg = q.map(|c| -c);
            let label = Pose::new(rng.uniform_rotation(), Vector3::new(0.0, 0.0, 4.0));
            // build poses directly from raw matrices to bypass sign canonicalization
            let t = Vector3::new(0.1, 0.2, 4.0);
            let a = crate::geometry::quat_to_matrix(q).unwrap();
            let b = crate::geometry::quat_to_matrix(neg).unwrap();
            assert_eq!(a, b);
            let pa = Pose::new(Quaternion::from_array(q).unwrap(), t);
            let pb = Pose::new(Quaternion::from_array(neg).unwrap(), t);
            assert_eq!(
                coord_loss(&pa, &label, &pts, LossMode::Coords3d, None).unwrap(),
                coord_loss(&pb, &label, &pts, LossMode::Coords3d, None).unwrap()
            );
        }
    }

    #[test]
    fn coords2d_needs_camera_and_positive_depth() {
        let pts = cube_corners(1.0);
        let p = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 3.0));
        assert!(coord_loss(&p, &p, &pts, LossMode::Coords2d, None).is_err());
        let near = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 0.2));
        assert!(matches!(
            coord_loss(&near, &p, &pts, LossMode::Coords2d, Some(&k_norm())),
            Err(PoseError::Projection { index: 0, .. })
        ));
        assert!(coord_loss(&p, &p, &[], LossMode::Coords3d, None).is_err());
    }

    fn fd_error(pred: &Pose, label: &Pose, pts: &[Vector3<f64>], mode: LossMode, k: Option<&CameraIntrinsics>) -> f64 {
        let h = 1e-6;
        let g = coord_loss_grad(pred, label, pts, mode, k).unwrap();
        let q = pred.rotation.to_array();
        let mut worst = 0.0f64;
        for c in 0..4 {
            let mut up = q;
            let mut dn = q;
            up[c] += h;
            dn[c] -= h;
            let lu = coord_loss(&Pose::new(Quaternion::from_array(up).unwrap(), pred.translation), label, pts, mode, k).unwrap();
            let ld = coord_loss(&Pose::new(Quaternion::from_array(dn).unwrap(), pred.translation), label, pts, mode, k).unwrap();
            worst = worst.max(crate::attention::relative_error(g.d_quat[c], (lu - ld) / (2.0 * h)));
        }
        for c in 0..3 {
            let mut up = pred.translation;
            let mut dn = pred.translation;
            up[c] += h;
            dn[c] -= h;
            let lu = coord_loss(&Pose::new(pred.rotation, up), label, pts, mode, k).unwrap();
            let ld = coord_loss(&Pose::new(pred.rotation, dn), label, pts, mode, k).unwrap();
            worst = worst.max(crate::attention::relative_error(g.d_translation[c], (lu - ld) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_3d() {
        let mut rng = SplitMix64::new(40);
        let pts = cube_corners(1.0);
        for _ in 0..30 {
            let label = Pose::new(rng.uniform_rotation(), Vector3::new(0.0, 0.0, 3.0));
            let pred = Pose::new(rng.uniform_rotation(), Vector3::new(0.2, -0.1, 3.4));
            let e = fd_error(&pred, &label, &pts, LossMode::Coords3d, None);
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        let mut rng = SplitMix64::new(41);
        let pts = cube_corners(0.3);
        for _ in 0..30 {
            let label = Pose::new(rng.uniform_rotation(), Vector3::new(0.0, 0.0, 3.0));
            let pred = Pose::new(rng.uniform_rotation(), Vector3::new(0.05, -0.05, 3.1));
            let e = fd_error(&pred, &label, &pts, LossMode::Coords2d, Some(&k_norm()));
            assert!(e < 1e-4, "{e}");
        }
    }

    #[test]
    fn gradient_vanishes_at_label_and_is_tangent() {
        let mut rng = SplitMix64::new(50);
        let pts = cube_corners(1.0);
        let label = Pose::new(rng.uniform_rotation(), Vector3::new(0.0, 0.0, 3.0));
        let g = coord_loss_grad(&label, &label, &pts, LossMode::Coords3d, None).unwrap();
        assert_eq!(g.norm(), 0.0);
        for _ in 0..100 {
            let pred = Pose::new(rng.uniform_rotation(), Vector3::new(0.3, 0.1, 2.5));
            let g = coord_loss_grad(&pred, &label, &pts, LossMode::Coords3d, None).unwrap();
            let q = Vector4::from(pred.rotation.to_array());
            assert!(g.d_quat.dot(&q).abs() < 1e-10);
        }
    }

    #[test]
    fn refine_from_label_stops_immediately() {
        let label = Pose::new(Quaternion::new(0.7, 0.1, 0.5, 0.2).unwrap(), Vector3::new(0.1, 0.0, 3.0));
        let r = refine_pose(&label, &label, &cube_corners(1.0), &RefineConfig::default(), None).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.loss, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn refine_recovers_perturbed_pose() {
        let pts = cube_corners(1.0);
        let model = ModelPoints::new(pts.to_vec()).unwrap();
        let mut rng = SplitMix64::new(60);
        for _ in 0..20 {
            let label = Pose::new(rng.uniform_rotation(), Vector3::new(0.2, -0.3, rng.uniform(2.0, 6.0)));
            let delta = Quaternion::from_axis_angle(&rng.unit_vector(), 5f64.to_radians()).unwrap();
            let init = Pose::new(delta * label.rotation, label.translation + Vector3::new(0.0, 0.0, 0.05));
            let r = refine_pose(&init, &label, &pts, &RefineConfig::default(), None).unwrap();
            assert!(r.loss_trace.windows(2).all(|w| w[1] < w[0]));
            assert!(add(&r.pose, &label, &model) < 1e-4, "{:?}", r.stop_reason);
        }
    }

    #[test]
    fn refine_2d_with_coplanar_points_reports() {
        let pts = [
            Vector3::new(-0.1, -0.1, 0.0),
            Vector3::new(0.1, -0.1, 0.0),
            Vector3::new(0.1, 0.1, 0.0),
            Vector3::new(-0.1, 0.1, 0.0),
        ];
        let label = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 2.0));
        let init = Pose::new(
            Quaternion::from_axis_angle(&Vector3::x(), 0.1).unwrap(),
            Vector3::new(0.0, 0.0, 2.1),
        );
        let cfg = RefineConfig { mode: LossMode::Coords2d, ..Default::default() };
        let r = refine_pose(&init, &label, &pts, &cfg, Some(&k_norm())).unwrap();
        assert!(r.loss < r.loss_trace[0]);
        assert!(r.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_refine_config() {
        let p = Pose::identity();
        let pts = cube_corners(1.0);
        for cfg in [
            RefineConfig { max_iters: 0, ..Default::default() },
            RefineConfig { backtrack: 1.0, ..Default::default() },
            RefineConfig { step0: -1.0, ..Default::default() },
        ] {
            assert!(refine_pose(&p, &p, &pts, &cfg, None).is_err());
        }
    }
}
