use nalgebra::{Matrix3, Vector2, Vector3};

use crate::box3d::{yaw_matrix, Box3D, BoxParams, CORNER_SIGNS};
use crate::camera::{Camera, EPS_DEPTH};
use crate::error::{Error, Result};
use crate::perspective::{extended_roi, PerspectivePoints, RoI, NUM_COORDS, NUM_POINTS};

use super::point::loss_pp;

/// Normalised projections of a parameterised box and their Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoints {
    /// Clipped into `[0, 1]` exactly like ground-truth generation.
    pub points: PerspectivePoints,
    /// `d coord / d [u, v, distance, w, l, h, yaw]`, one row per interleaved
    /// coordinate. Rows of clipped coordinates are zero.
    pub jac: [[f64; BoxParams::DIM]; NUM_COORDS],
}

impl ProjectedPoints {
    /// Pulls a gradient on the 18 coordinates back to the 7 box parameters.
    pub fn pullback(&self, g: &[f64; NUM_COORDS]) -> [f64; BoxParams::DIM] {
        let mut out = [0.0; BoxParams::DIM];
        for (row, gi) in self.jac.iter().zip(g) {
            for (o, j) in out.iter_mut().zip(row) {
                *o += gi * j;
            }
        }
        out
    }
}

/// Projects the center and corners of the box described by `params` straight
/// from camera-frame offsets, `Y_i = d * ray(u, v) + R * Rz(yaw) * offset_i`.
pub fn project_params(params: &BoxParams, cam: &Camera, roi: &RoI) -> Result<ProjectedPoints> {
    roi.validate()?;
    let k = &cam.intrinsics;
    let ext = extended_roi(roi);
    let q = Vector3::new(
        (params.center2d.x - k.cx) / k.fx,
        (params.center2d.y - k.cy) / k.fy,
        1.0,
    );
    let qn = q.norm();
    let n = q / qn;
    let proj_n = (Matrix3::identity() - n * n.transpose()) / qn;
    let dn_du = proj_n * Vector3::new(1.0 / k.fx, 0.0, 0.0);
    let dn_dv = proj_n * Vector3::new(0.0, 1.0 / k.fy, 0.0);

    let rot = cam.rotation();
    let ry = rot * yaw_matrix(params.yaw);
    let (s, c) = params.yaw.sin_cos();
    let d_yaw = Matrix3::new(
        -s, -c, 0.0, //
        c, -s, 0.0, //
        0.0, 0.0, 0.0,
    );
    let ry_d = rot * d_yaw;
    let d = params.distance;
    let size = params.size;

    let mut points = PerspectivePoints::from_points([[0.0; 2]; NUM_POINTS]);
    let mut jac = [[0.0; BoxParams::DIM]; NUM_COORDS];
    for i in 0..NUM_POINTS {
        // d Y / d [u, v, d, w, l, h, yaw]
        let mut dy = [Vector3::zeros(); BoxParams::DIM];
        dy[0] = dn_du * d;
        dy[1] = dn_dv * d;
        dy[2] = n;
        let mut y = n * d;
        if i > 0 {
            let sign = CORNER_SIGNS[i - 1];
            let local = Vector3::new(0.5 * sign[0] * size.x, 0.5 * sign[1] * size.y, 0.5 * sign[2] * size.z);
            y += ry * local;
            dy[3] = ry * Vector3::new(0.5 * sign[0], 0.0, 0.0);
            dy[4] = ry * Vector3::new(0.0, 0.5 * sign[1], 0.0);
            dy[5] = ry * Vector3::new(0.0, 0.0, 0.5 * sign[2]);
            dy[6] = ry_d * local;
        }
        if y.z <= EPS_DEPTH {
            return Err(Error::BehindCamera { depth: y.z });
        }
        let px = Vector2::new(k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy);
        let raw = Vector2::new((px.x - ext.x0) / ext.width(), (px.y - ext.y0) / ext.height());
        let clipped = raw.map(|v| v.clamp(0.0, 1.0));
        points.points[i] = [clipped.x, clipped.y];
        points.clipped[i] = clipped != raw;

        // d norm / d Y
        let gx = Vector3::new(1.0 / y.z, 0.0, -y.x / (y.z * y.z)) * (k.fx / ext.width());
        let gy = Vector3::new(0.0, 1.0 / y.z, -y.y / (y.z * y.z)) * (k.fy / ext.height());
        for p in 0..BoxParams::DIM {
            if clipped.x == raw.x {
                jac[2 * i][p] = gx.dot(&dy[p]);
            }
            if clipped.y == raw.y {
                jac[2 * i + 1][p] = gy.dot(&dy[p]);
            }
        }
    }
    Ok(ProjectedPoints { points, jac })
}

/// Reprojection consistency: MSE between the box's own (clipped, normalised)
/// perspective points and `gt`, with the gradient w.r.t.
/// `[u, v, distance, w, l, h, yaw]`.
pub fn loss_proj_params(
    params: &BoxParams,
    cam: &Camera,
    roi: &RoI,
    gt: &PerspectivePoints,
) -> Result<(f64, [f64; BoxParams::DIM])> {
    let proj = project_params(params, cam, roi)?;
    let (value, g) = loss_pp(&proj.points, gt);
    Ok((value, proj.pullback(&g)))
}

/// [`loss_proj_params`] for a box given in world coordinates.
pub fn loss_proj(
    pred_box: &Box3D,
    cam: &Camera,
    roi: &RoI,
    gt: &PerspectivePoints,
) -> Result<(f64, [f64; BoxParams::DIM])> {
    loss_proj_params(&BoxParams::from_box(pred_box, cam)?, cam, roi, gt)
}
