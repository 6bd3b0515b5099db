//! Direct numerical recovery of boxes and template banks by gradient descent
//! with a backtracking line search.
//!
//! A box scaled about the camera center projects to exactly the same image,
//! so reprojection alone fixes only the angular size of the box. The fitter
//! therefore works in the coordinates
//! `[u / W, v / H, ln d, ln(w / d), ln(l / d), ln(h / d), yaw]`, in which the
//! reprojection terms do not depend on `ln d` at all, and fixes the metric
//! scale with an [`Anchor`]: either by standing the box on the floor (`ln d`
//! is then solved for after every step, which leaves the objective unchanged)
//! or through the size term `L_size(size, init.size)` of the 3D group.

use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::box3d::{normalize_angle, Box3D, BoxParams};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::losses::{
    loss_perspective, loss_pp, project_params, total_loss, LossBreakdown, LossComponents, LossWeights, Phase,
};
use crate::perspective::{denormalize_points, extended_roi, logit, softmax, PerspectivePoints, RoI, TemplateBank};
use crate::perspective::{sigmoid, NUM_COORDS, NUM_POINTS};

/// Iterations without an accepted step after which a fit gives up.
pub const STALL_ITERS: usize = 50;
const ARMIJO: f64 = 1e-4;

/// How the otherwise free metric scale is pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// The box bottom rests on the floor `z = 0`.
    Floor,
    /// `L_size` against the initial size, weighted by `lambda_3d * lambda_size`.
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Initial trial step.
    pub step: f64,
    /// Step shrink factor while backtracking.
    pub step_decay: f64,
    /// Step growth factor after an accepted step.
    pub step_growth: f64,
    pub max_backtracks: usize,
    /// Iterations run in the warm-up phase before switching to the full
    /// objective.
    pub warmup_iters: usize,
    /// Stop once an accepted step improves the loss by less than this
    /// fraction.
    pub tol: f64,
    /// Stop once the loss itself drops below this.
    pub abs_tol: f64,
    pub min_distance: f64,
    pub min_size: f64,
    /// Parameter snapshot cadence in the trace (0 = never).
    pub snapshot_every: usize,
    pub anchor: Anchor,
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step: 1.0,
            step_decay: 0.5,
            step_growth: 2.0,
            max_backtracks: 60,
            warmup_iters: 10,
            tol: 1e-12,
            abs_tol: 1e-28,
            min_distance: 0.1,
            min_size: 0.05,
            snapshot_every: 10,
            anchor: Anchor::Floor,
            // with a tilted camera the image verticals genuinely converge, so
            // the perspective group is not zero at the true box
            weights: LossWeights {
                lambda_p: 0.0,
                ..LossWeights::default()
            },
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be positive"));
        }
        let positive = [
            ("step", self.step),
            ("min_distance", self.min_distance),
            ("min_size", self.min_size),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        if !(self.step_decay > 0.0 && self.step_decay < 1.0) {
            return Err(Error::invalid("step_decay", "must lie in (0, 1)"));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return Err(Error::invalid("step_growth", "must be finite and >= 1"));
        }
        if !(self.tol >= 0.0 && self.abs_tol >= 0.0) {
            return Err(Error::invalid("tol", "tolerances must be >= 0"));
        }
        self.weights.validate()
    }

    fn phase_at(&self, iter: usize) -> Phase {
        if iter < self.warmup_iters {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIters,
    /// No step was accepted in the first [`STALL_ITERS`] iterations; the
    /// result is the initial estimate.
    DidNotImprove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: Phase,
    pub step: f64,
    pub accepted: bool,
    /// Loss at the iterate held after this iteration, under this phase.
    pub loss: LossBreakdown,
    pub params: Option<[f64; BoxParams::DIM]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
}

impl FitTrace {
    pub const CSV_HEADER: &'static str =
        "iter,phase,step,accepted,pp,d1,d2,grav,dis,size,ori,box3d,proj,total,u,v,distance,w,l,h,yaw";

    /// CSV rows (no header), keeping every `every`-th row plus the last.
    pub fn to_csv_rows(&self, prefix: &str, every: usize) -> String {
        let mut out = String::new();
        let every = every.max(1);
        for (k, r) in self.rows.iter().enumerate() {
            if k % every != 0 && k + 1 != self.rows.len() {
                continue;
            }
            let phase = match r.phase {
                Phase::Warmup => "warmup",
                Phase::Full => "full",
            };
            let _ = write!(
                out,
                "{prefix}{},{phase},{:e},{},{}",
                r.iter,
                r.step,
                r.accepted as u8,
                r.loss.csv_fields()
            );
            match r.params {
                Some(p) => p.iter().for_each(|v| {
                    let _ = write!(out, ",{v:e}");
                }),
                None => out.push_str(",,,,,,,"),
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BoxParams,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub status: FitStatus,
    pub iterations: usize,
    /// Full-phase objective at the returned parameters.
    pub loss: LossBreakdown,
    pub trace: FitTrace,
}

struct BoxProblem<'a> {
    observed: &'a PerspectivePoints,
    prior_size: Vector3<f64>,
    cam: &'a Camera,
    roi: &'a RoI,
    cfg: &'a FitConfig,
    scale: Vector2<f64>,
}

impl BoxProblem<'_> {
    fn to_x(&self, p: &BoxParams) -> [f64; BoxParams::DIM] {
        let ld = p.distance.ln();
        [
            p.center2d.x / self.scale.x,
            p.center2d.y / self.scale.y,
            ld,
            p.size.x.ln() - ld,
            p.size.y.ln() - ld,
            p.size.z.ln() - ld,
            p.yaw,
        ]
    }

    fn to_params(&self, x: &[f64; BoxParams::DIM]) -> BoxParams {
        BoxParams {
            center2d: Vector2::new(x[0] * self.scale.x, x[1] * self.scale.y),
            distance: x[2].exp(),
            size: Vector3::new((x[2] + x[3]).exp(), (x[2] + x[4]).exp(), (x[2] + x[5]).exp()),
            yaw: x[6],
        }
    }

    /// Solves `ln d` so the box bottom touches the floor, keeping the angular
    /// parameters; leaves `x` alone under the size anchor or when the center
    /// ray cannot reach such a box.
    fn settle(&self, x: &[f64; BoxParams::DIM]) -> [f64; BoxParams::DIM] {
        if self.cfg.anchor != Anchor::Floor {
            return *x;
        }
        let p = self.to_params(x);
        let rz = (self.cam.rotation().transpose() * self.cam.ray_camera(&p.center2d)).z;
        let denom = 0.5 * x[5].exp() - rz;
        let d = self.cam.extrinsics.cam_height / denom;
        if !(denom > 1e-9 && d.is_finite()) {
            return *x;
        }
        let mut y = *x;
        y[2] = d.ln();
        y
    }

    /// Moves onto the floor (if anchored there) and clamps onto the bounds.
    fn admissible(&self, x: &[f64; BoxParams::DIM]) -> [f64; BoxParams::DIM] {
        self.project_bounds(&self.settle(x))
    }

    /// Clamps onto the parameter bounds.
    fn project_bounds(&self, x: &[f64; BoxParams::DIM]) -> [f64; BoxParams::DIM] {
        let mut p = self.to_params(x);
        p.distance = p.distance.max(self.cfg.min_distance);
        p.size = p.size.map(|s| s.max(self.cfg.min_size));
        let mut y = self.to_x(&p);
        // keep the untouched coordinates bit-exact
        y[0] = x[0];
        y[1] = x[1];
        y[6] = x[6];
        y
    }

    /// Objective and its gradient in fitting coordinates; `None` if the box
    /// cannot be projected.
    fn eval(&self, x: &[f64; BoxParams::DIM], phase: Phase) -> Option<(LossBreakdown, [f64; BoxParams::DIM])> {
        let p = self.to_params(x);
        let proj = project_params(&p, self.cam, self.roi).ok()?;
        let w = self.cfg.weights.for_phase(phase);
        let (pp, g_pp) = loss_pp(&proj.points, self.observed);
        let mut c = LossComponents {
            pp,
            proj: pp,
            ..Default::default()
        };
        let mut g18 = [0.0; NUM_COORDS];
        for (g, v) in g18.iter_mut().zip(&g_pp) {
            *g = (w.lambda_pp + w.lambda_proj) * v;
        }
        if w.lambda_p > 0.0 {
            let lp = loss_perspective(&proj.points);
            c.d1 = lp.d1;
            c.d2 = lp.d2;
            c.grav = lp.grav;
            for i in 0..NUM_COORDS {
                g18[i] += w.lambda_p
                    * (w.lambda_d1 * lp.grad_d1[i] + w.lambda_d2 * lp.grad_d2[i] + w.lambda_grav * lp.grad_grav[i]);
            }
        }
        let ds = match self.cfg.anchor {
            Anchor::Size => p.size - self.prior_size,
            Anchor::Floor => Vector3::zeros(),
        };
        c.size = ds.norm_squared() / 3.0;
        let loss = total_loss(&c, &self.cfg.weights, phase);
        if !loss.total.is_finite() {
            return None;
        }

        let mut gp = proj.pullback(&g18);
        for k in 0..3 {
            gp[3 + k] += w.lambda_3d * w.lambda_size * 2.0 * ds[k] / 3.0;
        }
        let s = [p.size.x * gp[3], p.size.y * gp[4], p.size.z * gp[5]];
        // under the floor anchor ln d is slaved to the other coordinates
        let g_ld = match self.cfg.anchor {
            Anchor::Size => p.distance * gp[2] + s[0] + s[1] + s[2],
            Anchor::Floor => 0.0,
        };
        let gx = [
            gp[0] * self.scale.x,
            gp[1] * self.scale.y,
            g_ld,
            s[0],
            s[1],
            s[2],
            gp[6],
        ];
        Some((loss, gx))
    }
}

/// Fits a box to observed perspective points starting from `init`, whose
/// size also serves as the scale anchor.
pub fn fit_box(
    observed: &PerspectivePoints,
    init: &BoxParams,
    cam: &Camera,
    roi: &RoI,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    roi.validate()?;
    if !(init.distance >= cfg.min_distance && init.size.iter().all(|s| *s >= cfg.min_size)) {
        return Err(Error::invalid("init", "distance or size outside the fitting bounds"));
    }
    let ext = extended_roi(roi);
    let prob = BoxProblem {
        observed,
        prior_size: init.size,
        cam,
        roi,
        cfg,
        scale: Vector2::new(ext.width(), ext.height()),
    };

    let x0 = prob.admissible(&prob.to_x(init));
    let mut x = x0;
    let mut phase = cfg.phase_at(0);
    let (mut loss, mut grad) = prob.eval(&x, phase).ok_or(Error::BehindCamera { depth: 0.0 })?;
    let (mut best_full, _) = prob.eval(&x, Phase::Full).ok_or(Error::NonFinite)?;
    let mut best_x = x;
    let mut step = cfg.step;
    let mut trace = FitTrace::default();
    let mut accepted_any = false;
    let mut status = FitStatus::MaxIters;
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        let now = cfg.phase_at(iter);
        if now != phase {
            phase = now;
            (loss, grad) = prob.eval(&x, phase).ok_or(Error::NonFinite)?;
        }
        if loss.total <= cfg.abs_tol {
            status = FitStatus::Converged;
            break;
        }
        iterations = iter + 1;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = None;
        let mut trial = step;
        for _ in 0..=cfg.max_backtracks {
            let cand = prob.admissible(&std::array::from_fn(|i| x[i] - trial * grad[i]));
            if let Some((l, g)) = prob.eval(&cand, phase) {
                if l.total <= loss.total - ARMIJO * trial * g2 && l.total < loss.total {
                    accepted = Some((cand, l, g));
                    break;
                }
            }
            trial *= cfg.step_decay;
        }
        let Some((cand, l, g)) = accepted else {
            trace.rows.push(row(iter, phase, trial, false, loss, None));
            status = if accepted_any || iter >= STALL_ITERS {
                FitStatus::Converged
            } else {
                FitStatus::DidNotImprove
            };
            break;
        };
        let improvement = loss.total - l.total;
        let prev = loss.total;
        x = cand;
        loss = l;
        grad = g;
        accepted_any = true;
        step = trial * cfg.step_growth;

        let full = if phase == Phase::Full {
            loss
        } else {
            prob.eval(&x, Phase::Full).ok_or(Error::NonFinite)?.0
        };
        if full.total < best_full.total {
            best_full = full;
            best_x = x;
        }
        let snap = (cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0).then(|| prob.to_params(&x).to_vec());
        trace.rows.push(row(iter, phase, trial, true, loss, snap));
        if phase == Phase::Full && improvement <= cfg.tol * prev {
            status = FitStatus::Converged;
            break;
        }
    }

    let (params, final_loss) = if status == FitStatus::DidNotImprove {
        let x0 = prob.to_x(init);
        (*init, prob.eval(&x0, Phase::Full).ok_or(Error::NonFinite)?.0)
    } else {
        (prob.to_params(&best_x), best_full)
    };
    let params = BoxParams {
        yaw: normalize_angle(params.yaw),
        ..params
    };
    Ok(FitResult {
        bbox: params.to_box(cam)?,
        params,
        status,
        iterations,
        loss: final_loss,
        trace,
    })
}

fn row(
    iter: usize,
    phase: Phase,
    step: f64,
    accepted: bool,
    loss: LossBreakdown,
    params: Option<[f64; BoxParams::DIM]>,
) -> TraceRow {
    TraceRow {
        iter,
        phase,
        step,
        accepted,
        loss,
        params,
    }
}

/// Initial box from the observation alone, assuming the box stands on the
/// floor: the bottom corners are intersected with `z = 0`, the top corners
/// with the verticals above them.
pub fn initial_estimate(observed: &PerspectivePoints, cam: &Camera, roi: &RoI, cfg: &FitConfig) -> Result<BoxParams> {
    let px = denormalize_points(observed, roi);
    let c = cam.center();
    let rot_t = cam.rotation().transpose();
    let ray = |p: &Vector2<f64>| rot_t * cam.ray_camera(p);

    let mut floor = [Vector2::zeros(); 4];
    for (k, f) in floor.iter_mut().enumerate() {
        let r = ray(&px[k + 1]);
        if r.z >= -1e-9 {
            return Err(Error::invalid("observed", "bottom corner does not see the floor"));
        }
        let t = -c.z / r.z;
        *f = (c + r * t).xy();
    }
    let [a, b, cc, d] = floor;
    let x_dir = (a - b) + (d - cc);
    let y_dir = (a - d) + (b - cc);
    // the local y axis turned back by a quarter turn lines up with local x
    let v = x_dir.normalize() + Vector2::new(y_dir.y, -y_dir.x).normalize();
    let yaw = v.y.atan2(v.x);
    let w = 0.5 * ((a - b).norm() + (d - cc).norm());
    let l = 0.5 * ((a - d).norm() + (b - cc).norm());

    let mut h = 0.0;
    for k in 0..4 {
        let r = ray(&px[k + 5]);
        let rxy = r.xy();
        let t = rxy.dot(&(floor[k] - c.xy())) / rxy.norm_squared().max(1e-300);
        h += 0.25 * (c.z + t * r.z);
    }
    let size = Vector3::new(w, l, h).map(|s| s.max(cfg.min_size));
    let center = (a + b + cc + d) / 4.0;
    let bbox = Box3D::new(Vector3::new(center.x, center.y, 0.5 * size.z), size, yaw)?;
    let mut p = BoxParams::from_box(&bbox, cam)?;
    p.distance = p.distance.max(cfg.min_distance);
    Ok(p)
}

/// Shared per-class templates plus per-example mixing logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateFit {
    /// The bank's own coefficient logits are the per-class mean of the
    /// per-example logits.
    pub bank: TemplateBank,
    pub example_logits: Vec<Vec<f64>>,
    /// Mean `loss_pp` after each accepted step, starting with the initial one.
    pub trace: Vec<f64>,
}

impl TemplateFit {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial loss")
    }
}

/// Interleaved flat index of template entry `j` (`[x0..x8, y0..y8]`).
fn flat_index(j: usize) -> usize {
    if j < NUM_POINTS {
        2 * j
    } else {
        2 * (j - NUM_POINTS) + 1
    }
}

struct TemplateProblem<'a> {
    data: &'a [(usize, PerspectivePoints)],
    classes: usize,
    k: usize,
}

impl TemplateProblem<'_> {
    /// Parameters: `C x K x 18` template logits, then `N x K` example logits.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let nt = self.classes * self.k * NUM_COORDS;
        let mut grad = vec![0.0; theta.len()];
        let mut total = 0.0;
        let n = self.data.len() as f64;
        for (e, (class, target)) in self.data.iter().enumerate() {
            let coeff = &theta[nt + e * self.k..nt + (e + 1) * self.k];
            let pi = softmax(coeff);
            let t0 = class * self.k * NUM_COORDS;
            let sig: Vec<f64> = theta[t0..t0 + self.k * NUM_COORDS]
                .iter()
                .map(|v| sigmoid(*v))
                .collect();
            let mut mix = [0.0; NUM_COORDS];
            for (kk, p) in pi.iter().enumerate() {
                for j in 0..NUM_COORDS {
                    mix[flat_index(j)] += p * sig[kk * NUM_COORDS + j];
                }
            }
            let (l, g) = loss_pp(&PerspectivePoints::from_flat(&mix), target);
            total += l / n;
            for (kk, p) in pi.iter().enumerate() {
                let mut dot = 0.0;
                for j in 0..NUM_COORDS {
                    let s = sig[kk * NUM_COORDS + j];
                    let gj = g[flat_index(j)] / n;
                    grad[t0 + kk * NUM_COORDS + j] += gj * p * s * (1.0 - s);
                    dot += gj * (s - mix[flat_index(j)]);
                }
                grad[nt + e * self.k + kk] += p * dot;
            }
        }
        (total, grad)
    }
}

/// Learns `k` templates per class and a mixing vector per example so that
/// each example is reproduced by its mixture.
///
/// Templates are seeded k-means++ style from the examples themselves (through
/// `logit(clamp(p, 0.01, 0.99))`) and each example starts leaning toward its
/// nearest seed.
pub fn fit_templates(
    data: &[(usize, PerspectivePoints)],
    classes: usize,
    k: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<TemplateFit> {
    cfg.validate()?;
    if classes == 0 || k == 0 {
        return Err(Error::invalid("templates", "need at least one class and one template"));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, (c, _)) in data.iter().enumerate() {
        by_class
            .get_mut(*c)
            .ok_or_else(|| Error::invalid("class", format!("{c} out of range")))?
            .push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::InsufficientData {
                class,
                available: members.len(),
                required: k,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = classes * k * NUM_COORDS;
    let mut theta = vec![0.0; nt + data.len() * k];
    let to_template = |p: &PerspectivePoints| -> [f64; NUM_COORDS] {
        std::array::from_fn(|j| logit(p.to_flat()[flat_index(j)].clamp(0.01, 0.99)))
    };
    let dist2 = |a: &PerspectivePoints, b: &PerspectivePoints| -> f64 {
        a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| (x - y).powi(2)).sum()
    };
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut seeds: Vec<usize> = vec![members[rng.random_range(0..members.len())]];
        while seeds.len() < k {
            let d: Vec<f64> = members
                .iter()
                .map(|&m| {
                    seeds
                        .iter()
                        .map(|&s| dist2(&data[m].1, &data[s].1))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let sum: f64 = d.iter().sum();
            let pick = if sum > 0.0 {
                let mut r = rng.random_range(0.0..sum);
                let mut idx = members.len() - 1;
                for (i, di) in d.iter().enumerate() {
                    if r < *di {
                        idx = i;
                        break;
                    }
                    r -= di;
                }
                members[idx]
            } else {
                members[rng.random_range(0..members.len())]
            };
            seeds.push(pick);
        }
        for (kk, &s) in seeds.iter().enumerate() {
            let t0 = (class * k + kk) * NUM_COORDS;
            theta[t0..t0 + NUM_COORDS].copy_from_slice(&to_template(&data[s].1));
        }
        for &m in members {
            let nearest = (0..k)
                .min_by(|&a, &b| dist2(&data[m].1, &data[seeds[a]].1).total_cmp(&dist2(&data[m].1, &data[seeds[b]].1)))
                .unwrap_or(0);
            theta[nt + m * k + nearest] = 2.0;
        }
    }

    let prob = TemplateProblem { data, classes, k };
    let (mut loss, mut grad) = prob.eval(&theta);
    let mut trace = vec![loss];
    let mut step = cfg.step;
    for _ in 0..cfg.max_iters {
        if loss <= cfg.abs_tol {
            break;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut trial = step;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - trial * g).collect();
            let (l, g) = prob.eval(&cand);
            if l.is_finite() && l <= loss - ARMIJO * trial * g2 && l < loss {
                accepted = Some((cand, l, g));
                break;
            }
            trial *= cfg.step_decay;
        }
        let Some((cand, l, g)) = accepted else { break };
        let improvement = loss - l;
        let prev = loss;
        theta = cand;
        loss = l;
        grad = g;
        trace.push(loss);
        step = trial * cfg.step_growth;
        if improvement <= cfg.tol * prev {
            break;
        }
    }

    let example_logits: Vec<Vec<f64>> = (0..data.len())
        .map(|e| theta[nt + e * k..nt + (e + 1) * k].to_vec())
        .collect();
    let mut coeff = vec![0.0; classes * k];
    for (class, members) in by_class.iter().enumerate() {
        for &m in members {
            for kk in 0..k {
                coeff[class * k + kk] += example_logits[m][kk] / members.len() as f64;
            }
        }
    }
    Ok(TemplateFit {
        bank: TemplateBank::new(classes, k, theta[..nt].to_vec(), coeff)?,
        example_logits,
        trace,
    })
}
