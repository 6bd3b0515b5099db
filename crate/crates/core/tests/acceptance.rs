//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles are computed here independently of the library where the
//! criterion allows it.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use persp3d::cli::{cmd_eval, cmd_fit, cmd_gen, Common, EvalArgs, FitArgs, GenArgs, DETECTIONS_FILE};
use persp3d::eval::{average_precision, evaluate, iou3d, match_detections, Detection, GroundTruth};
use persp3d::fitting::{fit_templates, FitConfig};
use persp3d::losses::gradcheck::{run_suite, Faults, DEFAULT_TOLERANCE};
use persp3d::losses::{loss_perspective, loss_pp, loss_proj};
use persp3d::perspective::{gt_perspective_points, sigmoid, NUM_COORDS, NUM_POINTS};
use persp3d::synth::{generate_scene, SynthConfig};
use persp3d::{compose_box, Box3D, Camera, CameraExtrinsics, CameraIntrinsics, PerspectivePoints, TemplateBank};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_camera(rng: &mut impl Rng) -> Camera {
    Camera::new(
        CameraIntrinsics {
            fx: rng.random_range(400.0..800.0),
            fy: rng.random_range(400.0..800.0),
            cx: rng.random_range(280.0..360.0),
            cy: rng.random_range(200.0..280.0),
            width: 640.0,
            height: 480.0,
        },
        CameraExtrinsics {
            tilt: rng.random_range(-0.5..0.5),
            roll: rng.random_range(-0.2..0.2),
            cam_height: rng.random_range(0.5..2.5),
        },
    )
    .unwrap()
}

fn max_corner_error(a: &Box3D, b: &Box3D) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    ca.iter()
        .zip(cb.iter())
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max)
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let cam = random_camera(&mut rng);
        let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let size = Vector3::new(
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
        );
        let yaw = rng.random_range(-3.0..3.0);
        let truth = compose_box(&pixel, rng.random_range(1.0..20.0), &size, yaw, &cam).unwrap();
        let center2d = cam.project_point(&truth.center).unwrap();
        let distance = (truth.center - cam.center()).norm();
        let rebuilt = compose_box(&center2d, distance, &truth.size, truth.yaw, &cam).unwrap();
        worst = worst.max(max_corner_error(&truth, &rebuilt));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 5.0,
        format!("max corner error {worst:.2e} m over 10^4 boxes, {secs:.2} s"),
    )
}

/// Exact perspective points of the first `n` synthetic objects.
fn exact_points(cfg: &SynthConfig, n: usize) -> Vec<PerspectivePoints> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < n {
        let scene = generate_scene(cfg, i).unwrap();
        out.extend(scene.objects.iter().map(|o| o.gt));
        i += 1;
    }
    out.truncate(n);
    out
}

fn perspective_nullity() -> Outcome {
    let tilted = exact_points(&SynthConfig::default(), 1000);
    let (mut d1, mut d2): (f64, f64) = (0.0, 0.0);
    for p in &tilted {
        assert!(!p.any_clipped());
        let l = loss_perspective(p);
        d1 = d1.max(l.d1);
        d2 = d2.max(l.d2);
    }
    let level = SynthConfig {
        tilt: [0.0, 0.0],
        roll: [0.0, 0.0],
        seed: 1,
        ..SynthConfig::default()
    };
    let mut grav: f64 = 0.0;
    for p in exact_points(&level, 1000) {
        let l = loss_perspective(&p);
        d1 = d1.max(l.d1);
        d2 = d2.max(l.d2);
        grav = grav.max(l.grav);
    }
    outcome(
        d1 < 1e-9 && d2 < 1e-9 && grav < 1e-12,
        format!("max L_d1 {d1:.2e}, L_d2 {d2:.2e}; level-camera L_grav {grav:.2e}"),
    )
}

fn gradient_checks() -> Outcome {
    let report = run_suite(0, 100, DEFAULT_TOLERANCE, Faults::default()).unwrap();
    let detail = report
        .entries
        .iter()
        .map(|e| format!("{} {:.2e}", e.loss, e.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = report.entries.len() == 4 && report.entries.iter().all(|e| e.configs == 100 && e.max_rel_err < 1e-5);
    outcome(pass, format!("max relative error: {detail}"))
}

fn proj_equivalence() -> Outcome {
    let cfg = SynthConfig {
        seed: 3,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut i = 0;
    while cases < 1000 {
        let scene = generate_scene(&cfg, i).unwrap();
        i += 1;
        for obj in &scene.objects {
            if cases == 1000 {
                break;
            }
            let b = obj.bbox;
            // Large enough to push some points out of the extended RoI.
            let shift = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            );
            let scale = Vector3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            );
            let pred = Box3D::new(
                b.center + shift,
                b.size.component_mul(&scale),
                b.yaw + rng.random_range(-1.0..1.0),
            )
            .unwrap();
            let Ok((via_proj, _)) = loss_proj(&pred, &scene.camera, &obj.roi, &obj.observed) else {
                continue;
            };
            let pts = gt_perspective_points(&pred, &scene.camera, &obj.roi).unwrap();
            let (via_pp, _) = loss_pp(&pts, &obj.observed);
            worst = worst.max((via_proj - via_pp).abs());
            cases += 1;
        }
    }
    outcome(
        worst < 1e-12,
        format!("max |loss_proj - loss_pp| {worst:.2e} over {cases} cases"),
    )
}

fn random_box(rng: &mut impl Rng, near: Option<&Box3D>) -> Box3D {
    let base = near.map_or(Vector3::new(0.0, 0.0, 1.0), |b| b.center);
    let center = base
        + Vector3::new(
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.5..0.5),
        );
    let size = Vector3::new(
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
        rng.random_range(0.3..2.0),
    );
    Box3D::new(center, size, rng.random_range(-PI..PI)).unwrap()
}

fn local_frame(b: &Box3D) -> Matrix3<f64> {
    let (s, c) = b.yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn contains(b: &Box3D, rot_t: &Matrix3<f64>, p: &Vector3<f64>) -> bool {
    let q = rot_t * (p - b.center);
    (0..3).all(|i| q[i].abs() <= 0.5 * b.size[i])
}

/// IoU from uniform samples inside `a`: I = V_a * (fraction inside `b`).
fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut impl Rng) -> f64 {
    let ra = local_frame(a);
    let rb_t = local_frame(b).transpose();
    let mut hits = 0usize;
    for _ in 0..samples {
        let local = Vector3::new(
            (rng.random::<f64>() - 0.5) * a.size.x,
            (rng.random::<f64>() - 0.5) * a.size.y,
            (rng.random::<f64>() - 0.5) * a.size.z,
        );
        if contains(b, &rb_t, &(a.center + ra * local)) {
            hits += 1;
        }
    }
    let va = a.size.product();
    let vb = b.size.product();
    let inter = va * hits as f64 / samples as f64;
    inter / (va + vb - inter)
}

fn iou_oracle() -> Outcome {
    let worst = (0..500u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let a = random_box(&mut rng, None);
            let b = random_box(&mut rng, Some(&a));
            (iou3d(&a, &b) - monte_carlo_iou(&a, &b, 1_000_000, &mut rng)).abs()
        })
        .reduce(|| 0.0, f64::max);
    let cube = |x: f64| Box3D::new(Vector3::new(x, 0.0, 0.5), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
    let half = iou3d(&cube(0.0), &cube(0.5));
    outcome(
        worst < 0.005 && half == 1.0 / 3.0,
        format!("max |iou - MC| {worst:.2e} over 500 pairs x 10^6 samples; half-offset cubes {half}"),
    )
}

fn unit_box(x: f64) -> Box3D {
    Box3D::new(Vector3::new(x, 5.0, 0.5), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap()
}

fn metric_correctness() -> Outcome {
    let perfect = average_precision(&[true, true], 2, 0).unwrap().ap;
    let two_gt = average_precision(&[true, false, true], 2, 0).unwrap().ap;
    let expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);

    // Same case through matching: two gts, a miss ranked between the hits.
    let gts: Vec<GroundTruth> = [0.0, 3.0]
        .iter()
        .map(|&x| GroundTruth {
            image_id: "s".into(),
            class: 0,
            bbox: unit_box(x),
        })
        .collect();
    let det = |x: f64, score: f64| Detection {
        image_id: "s".into(),
        class: 0,
        score,
        bbox: unit_box(x),
    };
    let dets = vec![det(0.0, 0.9), det(10.0, 0.8), det(3.0, 0.7)];
    let matched = evaluate(&dets, &gts, 0.15).unwrap().map;

    // Rank invariance under positive score scaling on a random crowd.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..20 {
        let id = format!("img{img}");
        for _ in 0..rng.random_range(1..5) {
            let b = random_box(&mut rng, None);
            let class = rng.random_range(0..3);
            gts.push(GroundTruth {
                image_id: id.clone(),
                class,
                bbox: b,
            });
            if rng.random_bool(0.8) {
                dets.push(Detection {
                    image_id: id.clone(),
                    class,
                    score: rng.random(),
                    bbox: random_box(&mut rng, Some(&b)),
                });
            }
        }
    }
    let base = evaluate(&dets, &gts, 0.15).unwrap();
    let base_flags = match_detections(&dets, &gts, 0.15);
    let invariant = [0.37, 5.0, 1e-3].iter().all(|&k| {
        let scaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: k * d.score,
                ..d.clone()
            })
            .collect();
        evaluate(&scaled, &gts, 0.15).unwrap() == base && match_detections(&scaled, &gts, 0.15) == base_flags
    });
    outcome(
        perfect == 1.0 && (two_gt - expected).abs() < 1e-12 && (matched - expected).abs() < 1e-12 && invariant,
        format!(
            "0-FP AP {perfect}, 2-gt AP {two_gt:.12} (matched {matched:.12}), scaling-invariant {invariant}, random mAP {:.4}",
            base.map
        ),
    )
}

fn common(out: &Path, jobs: usize) -> Common {
    Common {
        jobs,
        out: out.to_path_buf(),
    }
}

/// gen -> fit -> eval under `root`, returning the output directories.
fn pipeline(root: &Path, cfg: &SynthConfig, jobs: usize) -> Result<(PathBuf, PathBuf, PathBuf, f64), String> {
    let (data, fit, eval) = (root.join("data"), root.join("fit"), root.join("eval"));
    let cfg_path = root.join("synth.json");
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    fs::write(&cfg_path, serde_json::to_string(cfg).unwrap()).map_err(|e| e.to_string())?;
    cmd_gen(&GenArgs {
        config: Some(cfg_path),
        seed: None,
        common: common(&data, jobs),
    })
    .map_err(|e| e.to_string())?;
    cmd_fit(&FitArgs {
        data: data.clone(),
        config: None,
        seed: 0,
        trace_every: 10,
        common: common(&fit, jobs),
    })
    .map_err(|e| e.to_string())?;
    let (_, report) = cmd_eval(&EvalArgs {
        detections: fit.join(DETECTIONS_FILE),
        data: data.clone(),
        iou_threshold: 0.15,
        common: common(&eval, jobs),
    })
    .map_err(|e| e.to_string())?;
    Ok((data, fit, eval, report.map))
}

fn closed_loop() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut maps = Vec::new();
    for (name, sigma) in [("clean", 0.0), ("noisy", 0.02)] {
        let cfg = SynthConfig {
            seed: 7,
            num_scenes: 200,
            noise_sigma: sigma,
            ..SynthConfig::default()
        };
        match pipeline(&tmp.path().join(name), &cfg, 1) {
            Ok((.., map)) => maps.push(map),
            Err(e) => return outcome(false, format!("{name} pipeline failed: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        maps[0] == 1.0 && maps[1] >= 0.95 && secs < 120.0,
        format!(
            "mAP@0.15 sigma=0: {:.4}, sigma=0.02: {:.4}, {secs:.1} s single-threaded",
            maps[0], maps[1]
        ),
    )
}

fn template_mixture() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (classes, k) = (3, 4);
    let mut convex = true;
    let mut shift_err: f64 = 0.0;
    for _ in 0..200 {
        let templates: Vec<f64> = (0..classes * k * NUM_COORDS)
            .map(|_| rng.random_range(-6.0..6.0))
            .collect();
        let logits: Vec<f64> = (0..classes * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let bank = TemplateBank::new(classes, k, templates.clone(), logits).unwrap();
        for c in 0..classes {
            let w = bank.weights(c);
            convex &= w.iter().all(|&v| v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
            let mixed = bank.mix(c).unwrap();
            for j in 0..NUM_POINTS {
                for (coord, idx) in [(0, j), (1, j + NUM_POINTS)] {
                    let vals: Vec<f64> = (0..k)
                        .map(|t| sigmoid(templates[(c * k + t) * NUM_COORDS + idx]))
                        .collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = mixed.points[j][coord];
                    convex &= v >= lo - 1e-12 && v <= hi + 1e-12 && v > 0.0 && v < 1.0;
                }
            }
            let shift = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = bank.coeff_logits(c).iter().map(|v| v + shift).collect();
            let a = bank.mix_with(c, &shifted).unwrap().to_flat();
            for (p, q) in a.iter().zip(mixed.to_flat()) {
                shift_err = shift_err.max((p - q).abs());
            }
        }
    }

    let mut data = Vec::new();
    for i in 0..40 {
        let centre = if i % 2 == 0 { [0.35, 0.4] } else { [0.65, 0.6] };
        let mut pts = [[0.0; 2]; NUM_POINTS];
        for (j, p) in pts.iter_mut().enumerate() {
            let a = j as f64 * 0.7;
            p[0] = centre[0] + 0.2 * a.cos() + 0.01 * rng.random_range(-1.0..1.0);
            p[1] = centre[1] + 0.2 * a.sin() + 0.01 * rng.random_range(-1.0..1.0);
        }
        data.push((0, PerspectivePoints::from_points(pts)));
    }
    let cfg = FitConfig::default();
    let one = fit_templates(&data, 1, 1, &cfg, 0).unwrap().final_loss();
    let two = fit_templates(&data, 1, 2, &cfg, 0).unwrap().final_loss();
    outcome(
        convex && shift_err < 1e-12 && two < one,
        format!("convex {convex}, logit-shift error {shift_err:.2e}; mean loss_pp K=1 {one:.3e}, K=2 {two:.3e}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 11,
        num_scenes: 40,
        noise_sigma: 0.02,
        ..SynthConfig::default()
    };
    let runs: Vec<_> = [1, 4]
        .iter()
        .map(|&jobs| pipeline(&tmp.path().join(format!("j{jobs}")), &cfg, jobs))
        .collect();
    let (a, b) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "pipeline failed".into()),
    };
    let mut compared = 0;
    let mut differing = Vec::new();
    for (da, db) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
        let (fa, fb) = (files_under(da), files_under(db));
        if fa.iter().map(|p| p.file_name()).ne(fb.iter().map(|p| p.file_name())) {
            differing.push(format!("{} file lists", da.display()));
            continue;
        }
        for (pa, pb) in fa.iter().zip(&fb) {
            // Manifests record their input paths, which differ between the two run directories.
            let name = pa.file_name().unwrap().to_string_lossy().into_owned();
            let (ba, bb) = (fs::read(pa).unwrap(), fs::read(pb).unwrap());
            let same = if name == "manifest.json" {
                let strip = |bytes: &[u8]| {
                    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                    v.as_object_mut().unwrap().remove("inputs");
                    v
                };
                strip(&ba) == strip(&bb)
            } else {
                ba == bb
            };
            if !same {
                differing.push(name);
            }
            compared += 1;
        }
    }
    outcome(
        differing.is_empty() && compared > 40,
        format!("{compared} files compared between --jobs 1 and --jobs 4, differing: {differing:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("round-trip identity", round_trip),
        ("perspective-loss nullity", perspective_nullity),
        ("gradient checks", gradient_checks),
        ("reprojection equivalence", proj_equivalence),
        ("IoU oracle", iou_oracle),
        ("metric correctness", metric_correctness),
        ("closed loop", closed_loop),
        ("template mixture", template_mixture),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failures += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
