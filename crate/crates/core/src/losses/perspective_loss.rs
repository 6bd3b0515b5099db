//! Vanishing-point agreement and gravity-edge parallelism on the 8 projected
//! corners.
//!
//! Lines that are parallel in 3D meet at one vanishing point after projection.
//! `d1` compares the meeting point of `ad, eh` with that of `bc, fg` (both
//! pairs run along the box length); `d2` does the same for `ab, ef` against
//! `dc, hg` (box width). `grav` is the variance of the image angles of the
//! vertical edges `ae, bf, cg, dh`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::perspective::{unit_line, PerspectivePoints, LINE_EPS, NUM_COORDS};

pub const HUBER_DELTA: f64 = 1.0;
/// Lines whose unit-normal cross product has `|w|` below this are parallel.
pub const PARALLEL_EPS: f64 = 1e-9;
/// Value of a term whose lines are undefined (coincident endpoints).
pub const DEGENERATE_PENALTY: f64 = 10.0;
/// Intersections farther than this from the origin (normalised units) are
/// also scored by the angular fallback: input rounding alone moves a
/// vanishing point at range R by about R^2 * eps, so the Euclidean distance
/// stops carrying information long before the lines are parallel.
pub const FAR_LIMIT: f64 = 1e5;

// point indices: 0 = center, 1..=8 = a..h
const A: usize = 1;
const B: usize = 2;
const C: usize = 3;
const D: usize = 4;
const E: usize = 5;
const F: usize = 6;
const G: usize = 7;
const H: usize = 8;

type Line = (usize, usize);

const D1_PAIRS: [(Line, Line); 2] = [((A, D), (E, H)), ((B, C), (F, G))];
const D2_PAIRS: [(Line, Line); 2] = [((A, B), (E, F)), ((D, C), (H, G))];
const VERTICAL_EDGES: [Line; 4] = [(A, E), (B, F), (C, G), (D, H)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveLoss {
    pub d1: f64,
    pub d2: f64,
    pub grav: f64,
    pub grad_d1: [f64; NUM_COORDS],
    pub grad_d2: [f64; NUM_COORDS],
    pub grad_grav: [f64; NUM_COORDS],
}

impl PerspectiveLoss {
    pub fn sum(&self) -> f64 {
        self.d1 + self.d2 + self.grav
    }
}

pub fn loss_perspective(pts: &PerspectivePoints) -> PerspectiveLoss {
    let p: [Vector2<f64>; 9] = std::array::from_fn(|i| pts.point(i));
    let (d1, grad_d1) = vanishing_term(&p, &D1_PAIRS);
    let (d2, grad_d2) = vanishing_term(&p, &D2_PAIRS);
    let (grav, grad_grav) = gravity_term(&p);
    PerspectiveLoss {
        d1,
        d2,
        grav,
        grad_d1,
        grad_d2,
        grad_grav,
    }
}

fn add_grad(grad: &mut [f64; NUM_COORDS], idx: usize, g: Vector2<f64>) {
    grad[2 * idx] += g.x;
    grad[2 * idx + 1] += g.y;
}

/// Folds an angle into `[-pi/2, pi/2)` (lines are undirected).
fn fold_half_turn(a: f64) -> f64 {
    (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2
}

fn huber(r: f64) -> f64 {
    if r <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (r - 0.5 * HUBER_DELTA)
    }
}

fn vanishing_term(p: &[Vector2<f64>; 9], pairs: &[(Line, Line); 2]) -> (f64, [f64; NUM_COORDS]) {
    let mut grad = [0.0; NUM_COORDS];
    let mut ws = [0.0; 2];
    for (k, ((i, j), (m, n))) in pairs.iter().enumerate() {
        match (unit_line(&p[*i], &p[*j]), unit_line(&p[*m], &p[*n])) {
            (Ok(l1), Ok(l2)) => ws[k] = l1.cross(&l2).z,
            _ => return (DEGENERATE_PENALTY, grad),
        }
    }
    if ws.iter().any(|w| w.abs() < PARALLEL_EPS) {
        return parallel_fallback(p, pairs);
    }

    let mut u = [Vector2::zeros(); 2];
    for (k, (l1, l2)) in pairs.iter().enumerate() {
        u[k] = intersect(p, *l1, *l2).0;
    }
    if u.iter().any(|v| !(v.norm() <= FAR_LIMIT)) {
        return parallel_fallback(p, pairs);
    }
    let delta = u[0] - u[1];
    let r = delta.norm();
    let value = huber(r);
    let g_delta = if r <= HUBER_DELTA {
        delta
    } else {
        delta * (HUBER_DELTA / r)
    };
    for (k, (l1, l2)) in pairs.iter().enumerate() {
        let g_u = if k == 0 { g_delta } else { -g_delta };
        backprop_intersection(p, *l1, *l2, &g_u, &mut grad);
    }
    (value, grad)
}

fn homog(p: &Vector2<f64>) -> Vector3<f64> {
    p.push(1.0)
}

/// Euclidean intersection of two finite-slope line pairs, plus the raw
/// homogeneous point.
fn intersect(p: &[Vector2<f64>; 9], l1: Line, l2: Line) -> (Vector2<f64>, Vector3<f64>) {
    let a = homog(&p[l1.0]).cross(&homog(&p[l1.1]));
    let b = homog(&p[l2.0]).cross(&homog(&p[l2.1]));
    let x = a.cross(&b);
    (x.xy() / x.z, x)
}

/// Accumulates `d<g_u, u>/dp` for `u = (L1 x L2).xy / (L1 x L2).z`,
/// `L = P x Q` with `P = (p, 1)`.
fn backprop_intersection(p: &[Vector2<f64>; 9], l1: Line, l2: Line, g_u: &Vector2<f64>, grad: &mut [f64; NUM_COORDS]) {
    let (p1, p2) = (homog(&p[l1.0]), homog(&p[l1.1]));
    let (q1, q2) = (homog(&p[l2.0]), homog(&p[l2.1]));
    let la = p1.cross(&p2);
    let lb = q1.cross(&q2);
    let x = la.cross(&lb);
    let g_x = Vector3::new(g_u.x / x.z, g_u.y / x.z, -(g_u.x * x.x + g_u.y * x.y) / (x.z * x.z));
    // d(a x b).g = da.(b x g) + db.(g x a)
    let g_la = lb.cross(&g_x);
    let g_lb = g_x.cross(&la);
    add_grad(grad, l1.0, p2.cross(&g_la).xy());
    add_grad(grad, l1.1, g_la.cross(&p1).xy());
    add_grad(grad, l2.0, q2.cross(&g_lb).xy());
    add_grad(grad, l2.1, g_lb.cross(&q1).xy());
}

/// Unit direction of `p -> q` and its Jacobian w.r.t. `q` (the Jacobian w.r.t.
/// `p` is the negation).
fn unit_dir(p: &Vector2<f64>, q: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
    let v = q - p;
    let len = v.norm();
    let n = v / len;
    (n, (Matrix2::identity() - n * n.transpose()) / len)
}

/// Squared folded angle between the mean directions of the two line pairs;
/// used when a vanishing point lies at infinity.
fn parallel_fallback(p: &[Vector2<f64>; 9], pairs: &[(Line, Line); 2]) -> (f64, [f64; NUM_COORDS]) {
    let mut grad = [0.0; NUM_COORDS];
    let mut angles = [0.0; 2];
    let mut parts = Vec::with_capacity(2);
    for (k, (l1, l2)) in pairs.iter().enumerate() {
        let (n1, j1) = unit_dir(&p[l1.0], &p[l1.1]);
        let (n2, j2) = unit_dir(&p[l2.0], &p[l2.1]);
        let sign = if n1.dot(&n2) < 0.0 { -1.0 } else { 1.0 };
        let s = n1 + n2 * sign;
        angles[k] = s.y.atan2(s.x);
        parts.push((s, j1, j2, sign));
    }
    let diff = fold_half_turn(angles[0] - angles[1]);
    let value = diff * diff;
    for (k, (l1, l2)) in pairs.iter().enumerate() {
        let (s, j1, j2, sign) = parts[k];
        let g_angle = if k == 0 { 2.0 * diff } else { -2.0 * diff };
        let g_s = Vector2::new(-s.y, s.x) * (g_angle / s.norm_squared());
        let g1 = j1.transpose() * g_s;
        let g2 = j2.transpose() * g_s * sign;
        add_grad(&mut grad, l1.1, g1);
        add_grad(&mut grad, l1.0, -g1);
        add_grad(&mut grad, l2.1, g2);
        add_grad(&mut grad, l2.0, -g2);
    }
    (value, grad)
}

fn gravity_term(p: &[Vector2<f64>; 9]) -> (f64, [f64; NUM_COORDS]) {
    let mut grad = [0.0; NUM_COORDS];
    let mut theta = [0.0; 4];
    for (k, (i, j)) in VERTICAL_EDGES.iter().enumerate() {
        let v = p[*j] - p[*i];
        if v.norm() < LINE_EPS {
            return (DEGENERATE_PENALTY, grad);
        }
        theta[k] = v.y.atan2(v.x);
    }
    // Axial mean direction picks the branch; the variance itself does not
    // depend on it away from the fold.
    let (s, c) = theta
        .iter()
        .fold((0.0, 0.0), |(s, c), t| (s + (2.0 * t).sin(), c + (2.0 * t).cos()));
    let mean_dir = 0.5 * s.atan2(c);
    let dev = theta.map(|t| fold_half_turn(t - mean_dir));
    let mean_dev = dev.iter().sum::<f64>() / 4.0;
    let value = dev.iter().map(|d| (d - mean_dev).powi(2)).sum::<f64>() / 4.0;
    for (k, (i, j)) in VERTICAL_EDGES.iter().enumerate() {
        let g_theta = 0.5 * (dev[k] - mean_dev);
        let v = p[*j] - p[*i];
        let g_end = Vector2::new(-v.y, v.x) * (g_theta / v.norm_squared());
        add_grad(&mut grad, *j, g_end);
        add_grad(&mut grad, *i, -g_end);
    }
    (value, grad)
}
