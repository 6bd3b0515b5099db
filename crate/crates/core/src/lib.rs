//! Geometry and numerics for perspective-point based monocular 3D box detection.
//!
//! The crate is organised bottom-up:
//!
//! 1. [`camera`] – pinhole intrinsics, gravity-aligned extrinsics, projection and
//!    distance-parameterised back-projection.
//! 2. [`box3d`] – gravity-aligned oriented boxes and their canonical corner labelling.
//! 3. [`perspective`] – the 9-point perspective representation, extended-RoI
//!    normalisation and the sigmoid/softmax template mixture.
//! 4. [`losses`] – point, perspective (vanishing point + gravity), 3D attribute and
//!    reprojection losses with analytic gradients, plus a finite-difference checker.
//! 5. [`fitting`] – box recovery and template learning by backtracking gradient descent.
//! 6. [`eval`] – rotated 3D IoU, greedy matching, AP and mAP.
//! 7. [`synth`] – synthetic local-Manhattan scenes and noisy observations.
//! 8. [`cli`] – the `persp3d` command implementations (gen, fit, eval, gradcheck).
//!
//! World frame convention: `z` points up (against gravity), the floor is `z = 0`,
//! and the camera centre sits at `(0, 0, cam_height)` looking along `+y` when
//! tilt and roll are zero.

pub mod box3d;
pub mod camera;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fitting;
pub mod losses;
pub mod perspective;
pub mod synth;

pub use box3d::{compose_box, corners, Box3D, BoxParams, CornerSet};
pub use camera::{Camera, CameraExtrinsics, CameraIntrinsics};
pub use error::{Error, Result};
pub use perspective::{PerspectivePoints, RoI, TemplateBank};
