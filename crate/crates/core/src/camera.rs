//! Pinhole camera with a gravity-aligned world frame.
//!
//! World axes: `x` right, `y` forward (camera heading at zero yaw), `z` up.
//! Camera axes: `x` right, `y` down, `z` along the optical axis. The camera
//! centre is at `(0, 0, cam_height)`; its heading is fixed because a local
//! Manhattan world only needs a shared gravity direction.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane (camera-frame depth) are rejected.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::invalid("fx", "must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::invalid("fy", "must be positive"));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid("width/height", "must be positive"));
        }
        if !(0.0..=self.width).contains(&self.cx) {
            return Err(Error::invalid("cx", "must lie in [0, width]"));
        }
        if !(0.0..=self.height).contains(&self.cy) {
            return Err(Error::invalid("cy", "must lie in [0, height]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    /// Pitch about the camera x-axis; positive looks down.
    pub tilt: f64,
    /// Rotation about the optical axis.
    pub roll: f64,
    /// Height of the camera centre above the floor plane `z = 0`.
    pub cam_height: f64,
}

impl CameraExtrinsics {
    pub fn validate(&self) -> Result<()> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        if !(self.tilt.abs() < half_pi) {
            return Err(Error::invalid("tilt", "must satisfy |tilt| < pi/2"));
        }
        if !(self.roll.abs() < half_pi) {
            return Err(Error::invalid("roll", "must satisfy |roll| < pi/2"));
        }
        if !(self.cam_height > 0.0 && self.cam_height.is_finite()) {
            return Err(Error::invalid("cam_height", "must be positive"));
        }
        Ok(())
    }
}

/// World→camera rotation: `roll ∘ tilt ∘ axis_swap`.
///
/// `axis_swap` maps the level world frame (z up, y forward) onto the camera
/// axis convention (y down, z forward); at zero angles the result is that
/// permutation.
pub fn rotation_matrix(ext: &CameraExtrinsics) -> Matrix3<f64> {
    let axis_swap = Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, //
        0.0, 1.0, 0.0,
    );
    let (st, ct) = ext.tilt.sin_cos();
    let tilt = Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, ct, -st, //
        0.0, st, ct,
    );
    let (sr, cr) = ext.roll.sin_cos();
    let roll = Matrix3::new(
        cr, sr, 0.0, //
        -sr, cr, 0.0, //
        0.0, 0.0, 1.0,
    );
    roll * tilt * axis_swap
}

/// Intrinsics plus extrinsics. Serialises as one flat JSON object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    #[serde(flatten)]
    pub intrinsics: CameraIntrinsics,
    #[serde(flatten)]
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Result<Self> {
        intrinsics.validate()?;
        extrinsics.validate()?;
        Ok(Self { intrinsics, extrinsics })
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.extrinsics.cam_height)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.extrinsics)
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (x - self.center())
    }

    pub fn camera_to_world(&self, xc: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * xc + self.center()
    }

    /// Projects a camera-frame point to pixels.
    pub fn project_camera_point(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if xc.z <= EPS_DEPTH {
            return Err(Error::BehindCamera { depth: xc.z });
        }
        let k = &self.intrinsics;
        Ok(Vector2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy))
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_camera_point(&self.world_to_camera(x))
    }

    /// Unit viewing direction of a pixel, in the camera frame.
    pub fn ray_camera(&self, p: &Vector2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0).normalize()
    }

    /// The world point on the ray through `p` at Euclidean `distance` from the
    /// camera centre.
    pub fn back_project(&self, p: &Vector2<f64>, distance: f64) -> Result<Vector3<f64>> {
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::invalid("distance", "must be positive"));
        }
        Ok(self.camera_to_world(&(self.ray_camera(p) * distance)))
    }

    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        (x - self.center()).norm()
    }
}
