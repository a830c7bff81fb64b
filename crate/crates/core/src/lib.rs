//! RoI-normalized 6D object pose parameterization.
//!
//! - [`geometry`]: quaternions, rotations, rigid poses, pinhole projection, 2D boxes.
//! - [`roi`]: virtual RoI camera, infinite homography and the forward/inverse
//!   normalization of box, rotation, translation and depth.
//! - [`attention`]: non-local self-attention block with a loop-based oracle
//!   and analytic gradients.
//! - [`loss`]: smooth-L1 loss on transformed coordinates and a gradient
//!   descent pose refiner.
//! - [`metrics`]: ADD, ADD-S and threshold AUC.
//! - [`synth`]: seeded scene generator and model loaders.
//! - [`check`]: oracle suites used by the `check` command.

pub mod attention;
pub mod check;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod roi;
pub mod synth;

pub use error::{PoseError, Result};
pub use geometry::{CameraIntrinsics, Pose, Quaternion, Rect2D, RotationMatrix};
pub use roi::{NormalizedPose, VirtualRoICamera};
