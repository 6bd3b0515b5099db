//! Gravity-aligned oriented 3D boxes.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// Corner sign pattern in canonical order `a, b, c, d, e, f, g, h`.
///
/// The bottom face `a..d` runs counter-clockwise seen from above, starting at
/// `(+w/2, +l/2)`; `e..h` sit directly above `a..d`.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Rotation about the world z (gravity) axis.
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(
        c, -s, 0.0, //
        s, c, 0.0, //
        0.0, 0.0, 1.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vector3<f64>,
    /// `(w, l, h)`: extent along the box x, y and the vertical axis.
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, yaw: f64) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("size", "extents must be positive"));
        }
        if !self.center.iter().all(|c| c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::invalid("box", "non-finite value"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    pub fn corners(&self) -> CornerSet {
        corners(self)
    }

    /// Vertical interval `[bottom, top]`.
    pub fn z_range(&self) -> (f64, f64) {
        let half = 0.5 * self.size.z;
        (self.center.z - half, self.center.z + half)
    }

    /// Plan-view rectangle as 4 counter-clockwise `(x, y)` vertices.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let c = self.corners();
        [0, 1, 2, 3].map(|i| c.0[i].xy())
    }
}

/// The 8 corners in canonical order (see [`CORNER_SIGNS`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [Vector3<f64>; 8]);

impl CornerSet {
    pub fn iter(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.0.iter()
    }
}

impl std::ops::Index<usize> for CornerSet {
    type Output = Vector3<f64>;
    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.0[i]
    }
}

/// Corner offsets from the box center in the world frame.
pub fn corner_offsets(size: &Vector3<f64>, yaw: f64) -> [Vector3<f64>; 8] {
    let rot = yaw_matrix(yaw);
    CORNER_SIGNS.map(|s| rot * Vector3::new(0.5 * s[0] * size.x, 0.5 * s[1] * size.y, 0.5 * s[2] * size.z))
}

pub fn corners(b: &Box3D) -> CornerSet {
    CornerSet(corner_offsets(&b.size, b.yaw).map(|o| b.center + o))
}

/// Image-space box attributes: projected center, ray distance, size and yaw.
///
/// This is the parameterisation the estimation losses and the fitter work in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub center2d: Vector2<f64>,
    pub distance: f64,
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl BoxParams {
    pub const DIM: usize = 7;

    pub fn from_box(b: &Box3D, cam: &Camera) -> Result<Self> {
        Ok(Self {
            center2d: cam.project_point(&b.center)?,
            distance: cam.distance_to(&b.center),
            size: b.size,
            yaw: b.yaw,
        })
    }

    pub fn to_box(&self, cam: &Camera) -> Result<Box3D> {
        compose_box(&self.center2d, self.distance, &self.size, self.yaw, cam)
    }

    /// `[u, v, distance, w, l, h, yaw]`
    pub fn to_vec(&self) -> [f64; 7] {
        [
            self.center2d.x,
            self.center2d.y,
            self.distance,
            self.size.x,
            self.size.y,
            self.size.z,
            self.yaw,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            center2d: Vector2::new(x[0], x[1]),
            distance: x[2],
            size: Vector3::new(x[3], x[4], x[5]),
            yaw: x[6],
        }
    }
}

/// Builds a box from its projected center, ray distance, size and yaw.
pub fn compose_box(
    center2d: &Vector2<f64>,
    distance: f64,
    size: &Vector3<f64>,
    yaw: f64,
    cam: &Camera,
) -> Result<Box3D> {
    let center = cam.back_project(center2d, distance)?;
    Box3D::new(center, *size, yaw)
}
