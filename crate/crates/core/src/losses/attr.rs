use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::box3d::{compose_box, corners, yaw_matrix, CORNER_SIGNS};
use crate::camera::Camera;
use crate::error::Result;

/// Directly regressed 3D attributes of one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attr3D {
    pub distance: f64,
    pub size: Vector3<f64>,
    pub yaw: f64,
}

impl Attr3D {
    /// `[distance, w, l, h, yaw]`
    pub fn to_vec(&self) -> [f64; 5] {
        [self.distance, self.size.x, self.size.y, self.size.z, self.yaw]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            distance: x[0],
            size: Vector3::new(x[1], x[2], x[3]),
            yaw: x[4],
        }
    }
}

/// 3D attribute losses; gradients are w.r.t. `[distance, w, l, h, yaw]` of the
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss3D {
    pub dis: f64,
    pub size: f64,
    pub ori: f64,
    pub box3d: f64,
    pub grad_dis: [f64; 5],
    pub grad_size: [f64; 5],
    pub grad_ori: [f64; 5],
    pub grad_box3d: [f64; 5],
}

/// Distance, size and orientation errors, plus the mean squared corner
/// distance (m^2) between the two boxes composed at the shared `center2d`,
/// taken over the better of the two half-turn corner labellings.
pub fn loss_3d(pred: &Attr3D, gt: &Attr3D, cam: &Camera, center2d: &Vector2<f64>) -> Result<Loss3D> {
    let dd = pred.distance - gt.distance;
    let dis = dd * dd;
    let mut grad_dis = [0.0; 5];
    grad_dis[0] = 2.0 * dd;

    let ds = pred.size - gt.size;
    let size = ds.norm_squared() / 3.0;
    let mut grad_size = [0.0; 5];
    for i in 0..3 {
        grad_size[i + 1] = 2.0 * ds[i] / 3.0;
    }

    let (sp, cp) = pred.yaw.sin_cos();
    let (sg, cg) = gt.yaw.sin_cos();
    let ori = (sp - sg).powi(2) + (cp - cg).powi(2);
    let mut grad_ori = [0.0; 5];
    grad_ori[4] = 2.0 * (sp - sg) * cp - 2.0 * (cp - cg) * sp;

    let bp = compose_box(center2d, pred.distance, &pred.size, pred.yaw, cam)?;
    let bg = compose_box(center2d, gt.distance, &gt.size, gt.yaw, cam)?;
    let (cp_, cg_) = (corners(&bp), corners(&bg));
    // A cuboid maps onto itself under a half turn about the vertical axis, so
    // the corner loss takes the better of the two labellings (a<->c, b<->d, ...).
    let labelled: f64 = (0..8).map(|i| (cp_[i] - cg_[i]).norm_squared()).sum();
    let turned: f64 = (0..8).map(|i| (cp_[i] - cg_[i ^ 2]).norm_squared()).sum();
    let partner = |i: usize| if turned < labelled { i ^ 2 } else { i };
    let box3d = labelled.min(turned) / 8.0;

    let ray = cam.rotation().transpose() * cam.ray_camera(center2d);
    let rot = yaw_matrix(pred.yaw);
    let (s, c) = pred.yaw.sin_cos();
    let mut grad_box3d = [0.0; 5];
    for (i, sign) in CORNER_SIGNS.iter().enumerate() {
        let g = (cp_[i] - cg_[partner(i)]) * (2.0 / 8.0);
        let local = Vector3::new(
            0.5 * sign[0] * pred.size.x,
            0.5 * sign[1] * pred.size.y,
            0.5 * sign[2] * pred.size.z,
        );
        grad_box3d[0] += g.dot(&ray);
        grad_box3d[1] += g.dot(&(rot * Vector3::new(0.5 * sign[0], 0.0, 0.0)));
        grad_box3d[2] += g.dot(&(rot * Vector3::new(0.0, 0.5 * sign[1], 0.0)));
        grad_box3d[3] += g.z * 0.5 * sign[2];
        let d_rot = Vector3::new(-s * local.x - c * local.y, c * local.x - s * local.y, 0.0);
        grad_box3d[4] += g.dot(&d_rot);
    }

    Ok(Loss3D {
        dis,
        size,
        ori,
        box3d,
        grad_dis,
        grad_size,
        grad_ori,
        grad_box3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraExtrinsics, CameraIntrinsics};
    use std::f64::consts::PI;

    fn cam() -> Camera {
        Camera::new(
            CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640.0,
                height: 480.0,
            },
            CameraExtrinsics {
                tilt: 0.15,
                roll: -0.05,
                cam_height: 1.5,
            },
        )
        .unwrap()
    }

    fn attr(d: f64, w: f64, l: f64, h: f64, yaw: f64) -> Attr3D {
        Attr3D {
            distance: d,
            size: Vector3::new(w, l, h),
            yaw,
        }
    }

    #[test]
    fn identical_attributes_are_free() {
        let a = attr(4.0, 1.0, 0.7, 0.9, 0.3);
        let l = loss_3d(&a, &a, &cam(), &Vector2::new(300.0, 260.0)).unwrap();
        assert_eq!((l.dis, l.size, l.ori, l.box3d), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn half_turn_on_square_plan() {
        let p = attr(4.0, 0.8, 0.8, 1.0, 0.3 + PI);
        let g = attr(4.0, 0.8, 0.8, 1.0, 0.3);
        let l = loss_3d(&p, &g, &cam(), &Vector2::new(300.0, 260.0)).unwrap();
        assert!(l.ori > 3.9);
        assert!(l.box3d < 1e-24);
    }

    #[test]
    fn quarter_turn_is_penalised() {
        let p = attr(4.0, 1.2, 0.6, 1.0, 0.3 + PI / 2.0);
        let g = attr(4.0, 1.2, 0.6, 1.0, 0.3);
        let l = loss_3d(&p, &g, &cam(), &Vector2::new(300.0, 260.0)).unwrap();
        // plan corners (+-0.6, +-0.3) rotated a quarter turn: nearest labelling
        // leaves each corner sqrt(0.3^2 + 0.9^2) or sqrt(0.9^2 + 0.3^2) away
        assert!((l.box3d - 0.9).abs() < 1e-12, "{}", l.box3d);
    }

    #[test]
    fn distance_offset_translates_rigidly() {
        let p = attr(4.5, 1.0, 0.7, 0.9, 0.3);
        let g = attr(4.0, 1.0, 0.7, 0.9, 0.3);
        let l = loss_3d(&p, &g, &cam(), &Vector2::new(300.0, 260.0)).unwrap();
        assert!((l.dis - 0.25).abs() < 1e-15);
        assert!((l.box3d - 0.25).abs() < 1e-12);
        assert_eq!(l.size, 0.0);
        assert_eq!(l.ori, 0.0);
    }

    #[test]
    fn invalid_distance_propagates() {
        let p = attr(-1.0, 1.0, 0.7, 0.9, 0.3);
        let g = attr(4.0, 1.0, 0.7, 0.9, 0.3);
        assert!(loss_3d(&p, &g, &cam(), &Vector2::new(300.0, 260.0)).is_err());
    }
}
