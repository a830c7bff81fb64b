//! Virtual RoI camera and the forward/inverse normalization of box, rotation,
//! translation and depth targets.
//!
//! An RoI is treated as a rotated virtual view of the image camera that shares
//! its optical center. The rotation `r_roi` takes the ray through the RoI
//! center onto the principal axis `(0, 0, 1)`, and the virtual intrinsics map
//! the RoI to the unit square with its center at `(0.5, 0.5)`.
//!
//! Normalized targets:
//! - rotation: `R_obj = r_roi * R`;
//! - translation: the object ray `(X/d, Y/d, 1)` rotated by `r_roi` and
//!   rescaled to third component 1 gives `(x_obj, y_obj)`;
//! - depth: `d_obj = ln(m_roi / (m_i * d))`, with `m_roi` the RoI area and
//!   `m_i` the area of the model's box projected at unit depth, so that
//!   `d = m_roi / (m_i * exp(d_obj))`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{PoseError, Result};
use crate::geometry::{
    bbox2d_of, matrix_to_quat, project_points, rodrigues_between, CameraIntrinsics, Pose,
    Quaternion, Rect2D, RotationMatrix,
};

/// Largest `|d_obj|` accepted by [`recover_pose`]; `exp(700)` is still finite.
pub const MAX_DEPTH_CODE: f64 = 700.0;
/// Smallest third component of a rotated ray.
pub const MIN_RAY_Z: f64 = 1e-9;

/// Intrinsics, rotation and footprint of the virtual camera looking through an RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualRoICamera {
    pub k_roi: CameraIntrinsics,
    pub r_roi: RotationMatrix,
    pub roi: Rect2D,
}

impl VirtualRoICamera {
    pub fn new(k_c: &CameraIntrinsics, roi: &Rect2D) -> Result<Self> {
        build_virtual_camera(k_c, roi)
    }

    /// RoI area in square pixels.
    pub fn roi_area(&self) -> f64 {
        self.roi.area()
    }

    /// Expresses an image-camera pose in the virtual camera frame.
    pub fn to_roi_frame(&self, pose: &Pose) -> Pose {
        let r = matrix_to_quat(&self.r_roi);
        Pose::new(r * pose.rotation, self.r_roi.apply(&pose.translation))
    }

    /// Inverse of [`Self::to_roi_frame`].
    pub fn from_roi_frame(&self, pose: &Pose) -> Pose {
        let r_inv = self.r_roi.transpose();
        Pose::new(
            matrix_to_quat(&r_inv) * pose.rotation,
            r_inv.apply(&pose.translation),
        )
    }
}

/// Box regression target relative to an RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox {
    pub t_x: f64,
    pub t_y: f64,
    pub t_w: f64,
    pub t_h: f64,
}

/// Pose target in the virtual RoI camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPose {
    pub q_obj: Quaternion,
    pub x_obj: f64,
    pub y_obj: f64,
    pub d_obj: f64,
}

/// `(fx / r_w, fy / r_h, 0.5, 0.5)`.
pub fn virtual_intrinsics(k_c: &CameraIntrinsics, roi: &Rect2D) -> Result<CameraIntrinsics> {
    k_c.validate()?;
    roi.validate()?;
    CameraIntrinsics::new(k_c.fx / roi.w, k_c.fy / roi.h, 0.5, 0.5)
}

/// Unit ray through the RoI center.
pub fn roi_axis(k_c: &CameraIntrinsics, roi: &Rect2D) -> Result<Vector3<f64>> {
    k_c.validate()?;
    roi.validate()?;
    Ok(k_c.back_project(&roi.center()).normalize())
}

pub fn build_virtual_camera(k_c: &CameraIntrinsics, roi: &Rect2D) -> Result<VirtualRoICamera> {
    let k_roi = virtual_intrinsics(k_c, roi)?;
    let c_roi = roi_axis(k_c, roi)?;
    let r_roi = rodrigues_between(&c_roi, &Vector3::z())?;
    Ok(VirtualRoICamera {
        k_roi,
        r_roi,
        roi: *roi,
    })
}

/// Image-to-RoI homography `K_roi * r_roi * K_c^-1`, scaled so the RoI center
/// maps to homogeneous third component 1.
pub fn infinite_homography(cam: &VirtualRoICamera, k_c: &CameraIntrinsics) -> Matrix3<f64> {
    let h = cam.k_roi.matrix() * cam.r_roi.matrix() * k_c.inverse_matrix();
    let w = (h * cam.roi.center().push(1.0)).z;
    h / w
}

pub fn normalize_bbox(obj: &Rect2D, roi: &Rect2D) -> Result<NormalizedBox> {
    obj.validate()?;
    roi.validate()?;
    Ok(NormalizedBox {
        t_x: (obj.x - roi.x) / roi.w,
        t_y: (obj.y - roi.y) / roi.h,
        t_w: (obj.w / roi.w).ln(),
        t_h: (obj.h / roi.h).ln(),
    })
}

pub fn recover_bbox(nb: &NormalizedBox, roi: &Rect2D) -> Result<Rect2D> {
    roi.validate()?;
    Rect2D::new(
        nb.t_x * roi.w + roi.x,
        nb.t_y * roi.h + roi.y,
        nb.t_w.exp() * roi.w,
        nb.t_h.exp() * roi.h,
    )
}

/// Area of the 2D box of `model_corners` seen at identity rotation and unit depth.
pub fn identity_area(k_c: &CameraIntrinsics, model_corners: &[Vector3<f64>]) -> Result<f64> {
    let canonical = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 1.0));
    let uv = project_points(k_c, &canonical, model_corners)?;
    Ok(bbox2d_of(&uv)?.area())
}

fn check_identity_area(m_i: f64) -> Result<()> {
    if m_i > 0.0 && m_i.is_finite() {
        Ok(())
    } else {
        Err(PoseError::Validation(format!(
            "identity-mapping area must be positive (got {m_i})"
        )))
    }
}

pub fn normalize_pose(pose: &Pose, cam: &VirtualRoICamera, m_i: f64) -> Result<NormalizedPose> {
    check_identity_area(m_i)?;
    let t = pose.translation;
    let d = t.z;
    if !(d > 0.0) || !t.iter().all(|c| c.is_finite()) {
        return Err(PoseError::Validation(format!(
            "pose depth must be positive and finite (got {d})"
        )));
    }
    let r_obj = cam.r_roi * pose.rotation_matrix();
    let v = cam.r_roi.apply(&Vector3::new(t.x / d, t.y / d, 1.0));
    if v.z <= MIN_RAY_Z {
        return Err(PoseError::BehindVirtualCamera(v.z));
    }
    Ok(NormalizedPose {
        q_obj: matrix_to_quat(&r_obj),
        x_obj: v.x / v.z,
        y_obj: v.y / v.z,
        d_obj: (cam.roi_area() / (m_i * d)).ln(),
    })
}

pub fn recover_pose(np: &NormalizedPose, cam: &VirtualRoICamera, m_i: f64) -> Result<Pose> {
    check_identity_area(m_i)?;
    if ![np.x_obj, np.y_obj, np.d_obj].iter().all(|v| v.is_finite()) {
        return Err(PoseError::Validation("normalized pose is not finite".into()));
    }
    if np.d_obj.abs() > MAX_DEPTH_CODE {
        return Err(PoseError::Range(format!(
            "depth code {} exceeds +/-{MAX_DEPTH_CODE}",
            np.d_obj
        )));
    }
    let r_inv = cam.r_roi.transpose();
    let rotation = matrix_to_quat(&(r_inv * np.q_obj.to_matrix()));
    let d = cam.roi_area() / (m_i * np.d_obj.exp());
    let ray = r_inv.apply(&Vector3::new(np.x_obj, np.y_obj, 1.0));
    if ray.z <= MIN_RAY_Z {
        return Err(PoseError::BehindVirtualCamera(ray.z));
    }
    Ok(Pose::new(
        rotation,
        Vector3::new(ray.x / ray.z * d, ray.y / ray.z * d, d),
    ))
}
