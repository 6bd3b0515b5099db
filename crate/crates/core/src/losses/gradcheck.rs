//! Central finite-difference verification of analytic gradients.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::box3d::{compose_box, corners, Box3D, BoxParams};
use crate::camera::{Camera, CameraExtrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::perspective::{gt_perspective_points, project_box_pixels, unit_line, PerspectivePoints, RoI};

use super::attr::{loss_3d, Attr3D};
use super::perspective_loss::{loss_perspective, HUBER_DELTA, PARALLEL_EPS};
use super::point::loss_pp;
use super::proj::{loss_proj_params, project_params};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Maximum relative error between `grad` and central differences of `f` at `x`.
///
/// Step `1e-5 * max(1, |x_i|)`; the relative error of coordinate `i` is
/// `|fd - an| / max(|fd|, |an|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, analytic) = f(x);
    if !f0.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe).0;
        probe[i] = x[i] - h;
        let fm = f(&probe).0;
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite);
        }
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckEntry {
    pub loss: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// Random valid configuration shared by the checks: a camera, a box in front
/// of it and a RoI around its projection.
#[derive(Debug, Clone, Copy)]
pub struct Scenario {
    pub cam: Camera,
    pub gt_box: Box3D,
    pub roi: RoI,
    pub gt: PerspectivePoints,
}

pub fn random_scenario(rng: &mut impl Rng) -> Scenario {
    loop {
        let cam = Camera::new(
            CameraIntrinsics {
                fx: rng.random_range(450.0..650.0),
                fy: rng.random_range(450.0..650.0),
                cx: rng.random_range(300.0..340.0),
                cy: rng.random_range(220.0..260.0),
                width: 640.0,
                height: 480.0,
            },
            CameraExtrinsics {
                tilt: rng.random_range(-0.3..0.3),
                roll: rng.random_range(-0.15..0.15),
                cam_height: rng.random_range(1.0..1.8),
            },
        )
        .expect("sampled camera is valid");
        let size = Vector3::new(
            rng.random_range(0.4..2.0),
            rng.random_range(0.4..2.0),
            rng.random_range(0.4..1.8),
        );
        let center = Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(3.0..7.0),
            0.5 * size.z + rng.random_range(0.0..0.3),
        );
        let Ok(b) = Box3D::new(center, size, rng.random_range(-3.1..3.1)) else {
            continue;
        };
        let Ok(px) = project_box_pixels(&b, &cam) else {
            continue;
        };
        let Ok(roi) = RoI::bounding(&px[1..]) else {
            continue;
        };
        let roi = roi.scaled(1.1);
        let Ok(gt) = gt_perspective_points(&b, &cam, &roi) else {
            continue;
        };
        return Scenario {
            cam,
            gt_box: b,
            roi,
            gt,
        };
    }
}

/// Hooks for negative-control runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Flip the sign of the reprojection gradient w.r.t. distance.
    pub flip_proj_distance: bool,
}

fn jitter(p: &PerspectivePoints, rng: &mut impl Rng, amp: f64) -> PerspectivePoints {
    let mut q = *p;
    for pt in q.points.iter_mut() {
        pt[0] += rng.random_range(-amp..amp);
        pt[1] += rng.random_range(-amp..amp);
    }
    q
}

/// True when every vanishing-point pair meets at a clear angle close to its
/// segments and no Huber distance sits near `delta`. Far intersections are
/// the onset of the parallel-line degeneracy, where the third derivatives that
/// central differences neglect grow like (distance / segment length)^3.
fn away_from_kinks(p: &PerspectivePoints) -> bool {
    let pt = |i: usize| p.point(i);
    let pairs = [[(1, 4), (5, 8), (2, 3), (6, 7)], [(1, 2), (5, 6), (4, 3), (8, 7)]];
    for lines in pairs {
        let mut us = Vec::new();
        for k in [0, 2] {
            let (Ok(l1), Ok(l2)) = (
                unit_line(&pt(lines[k].0), &pt(lines[k].1)),
                unit_line(&pt(lines[k + 1].0), &pt(lines[k + 1].1)),
            ) else {
                return false;
            };
            let x = l1.cross(&l2);
            if x.z.abs() < 3e8 * PARALLEL_EPS {
                return false;
            }
            let u = x.xy() / x.z;
            for (i, j) in [lines[k], lines[k + 1]] {
                let len = (pt(i) - pt(j)).norm();
                let reach = (u - pt(i)).norm().max((u - pt(j)).norm());
                if len < 0.1 || reach > 2.0 * len {
                    return false;
                }
            }
            us.push(u);
        }
        let r = (us[0] - us[1]).norm();
        if (r - HUBER_DELTA).abs() < 0.05 {
            return false;
        }
    }
    // vertical edges: clear of the half-turn fold of the gravity term
    let mut theta = [0.0; 4];
    for (k, i) in (1..5).enumerate() {
        let v = pt(i + 4) - pt(i);
        if v.norm() < 0.1 {
            return false;
        }
        theta[k] = v.y.atan2(v.x);
    }
    let (s, c) = theta
        .iter()
        .fold((0.0, 0.0), |(s, c), t| (s + (2.0 * t).sin(), c + (2.0 * t).cos()));
    let mean_dir = 0.5 * f64::atan2(s, c);
    theta
        .iter()
        .all(|t| ((t - mean_dir + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2).abs() < FRAC_PI_4)
}

/// Relative error is meaningless on a partial derivative that happens to be
/// tiny next to the others (truncation error is set by the largest scale), so
/// such configurations are resampled. Exact zeros are untouched points.
fn no_vanishing_components(p: &PerspectivePoints) -> bool {
    let l = loss_perspective(p);
    [l.grad_d1, l.grad_d2, l.grad_grav].iter().all(|g| {
        let top = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        g.iter().all(|v| *v == 0.0 || v.abs() >= 1e-2 * top)
    })
}

fn check_loss_pp(rng: &mut impl Rng) -> Result<f64> {
    let s = random_scenario(rng);
    let pred = jitter(&s.gt, rng, 0.05);
    grad_check(
        |x| {
            let (l, g) = loss_pp(&PerspectivePoints::from_flat(x), &s.gt);
            (l, g.to_vec())
        },
        &pred.to_flat(),
    )
}

fn check_loss_perspective(rng: &mut impl Rng) -> Result<f64> {
    let pts = loop {
        let s = random_scenario(rng);
        let p = jitter(&s.gt, rng, 0.1);
        if away_from_kinks(&p) && no_vanishing_components(&p) {
            break p;
        }
    };
    let x = pts.to_flat();
    let mut worst: f64 = 0.0;
    for term in 0..3 {
        let e = grad_check(
            |x| {
                let l = loss_perspective(&PerspectivePoints::from_flat(x));
                match term {
                    0 => (l.d1, l.grad_d1.to_vec()),
                    1 => (l.d2, l.grad_d2.to_vec()),
                    _ => (l.grav, l.grad_grav.to_vec()),
                }
            },
            &x,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_loss_3d(rng: &mut impl Rng) -> Result<f64> {
    let (s, pred, gt, center2d) = loop {
        let s = random_scenario(rng);
        let p = BoxParams::from_box(&s.gt_box, &s.cam)?;
        let gt = Attr3D {
            distance: p.distance,
            size: p.size,
            yaw: p.yaw,
        };
        let pred = Attr3D {
            distance: gt.distance * rng.random_range(0.8..1.2),
            size: gt.size.map(|v| v * rng.random_range(0.8..1.2)),
            yaw: gt.yaw + rng.random_range(-0.5..0.5),
        };
        // stay clear of the switch between the two corner labellings
        let bp = compose_box(&p.center2d, pred.distance, &pred.size, pred.yaw, &s.cam)?;
        let (cp, cg) = (corners(&bp), corners(&s.gt_box));
        let a: f64 = (0..8).map(|i| (cp[i] - cg[i]).norm_squared()).sum();
        let b: f64 = (0..8).map(|i| (cp[i] - cg[i ^ 2]).norm_squared()).sum();
        if (a - b).abs() > 1e-2 * a.max(b) {
            break (s, pred, gt, p.center2d);
        }
    };
    let x = pred.to_vec();
    let mut worst: f64 = 0.0;
    for term in 0..4 {
        let e = grad_check(
            |x| match loss_3d(&Attr3D::from_slice(x), &gt, &s.cam, &center2d) {
                Ok(l) => match term {
                    0 => (l.dis, l.grad_dis.to_vec()),
                    1 => (l.size, l.grad_size.to_vec()),
                    2 => (l.ori, l.grad_ori.to_vec()),
                    _ => (l.box3d, l.grad_box3d.to_vec()),
                },
                Err(_) => (f64::NAN, vec![f64::NAN; 5]),
            },
            &x,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_loss_proj(rng: &mut impl Rng, faults: Faults) -> Result<f64> {
    let (s, params) = loop {
        let s = random_scenario(rng);
        let mut p = BoxParams::from_box(&s.gt_box, &s.cam)?;
        p.center2d += Vector2::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
        p.distance *= rng.random_range(0.85..1.15);
        p.size = p.size.map(|v| v * rng.random_range(0.85..1.15));
        p.yaw += rng.random_range(-0.3..0.3);
        let Ok(proj) = project_params(&p, &s.cam, &s.roi) else {
            continue;
        };
        let margin = proj.points.points.iter().flatten().all(|v| (0.01..=0.99).contains(v));
        if margin && !proj.points.any_clipped() {
            break (s, p);
        }
    };
    grad_check(
        |x| match loss_proj_params(&BoxParams::from_slice(x), &s.cam, &s.roi, &s.gt) {
            Ok((l, mut g)) => {
                if faults.flip_proj_distance {
                    g[2] = -g[2];
                }
                (l, g.to_vec())
            }
            Err(_) => (f64::NAN, vec![f64::NAN; BoxParams::DIM]),
        },
        &params.to_vec(),
    )
}

/// Runs every loss's gradient check over `configs` random configurations.
pub fn run_suite(seed: u64, configs: usize, tolerance: f64, faults: Faults) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    for (idx, name) in ["loss_pp", "loss_perspective", "loss_3d", "loss_proj"]
        .iter()
        .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64 * 0x9E37_79B9));
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let e = match idx {
                0 => check_loss_pp(&mut rng)?,
                1 => check_loss_perspective(&mut rng)?,
                2 => check_loss_3d(&mut rng)?,
                _ => check_loss_proj(&mut rng, faults)?,
            };
            worst = worst.max(e);
        }
        entries.push(GradCheckEntry {
            loss: name.to_string(),
            configs,
            max_rel_err: worst,
            passed: worst < tolerance,
        });
    }
    Ok(GradCheckReport {
        seed,
        tolerance,
        entries,
    })
}
