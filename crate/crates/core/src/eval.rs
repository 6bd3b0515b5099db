//! Detection evaluation: rotated 3D IoU, greedy matching, AP and mAP.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::box3d::Box3D;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.15;

/// Collinearity tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: Box3D,
}

/// Precision/recall points in descending score order, and their AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRSeries {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>()
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % clip.len()] - a;
        let side = |p: Vector2<f64>| cross(edge, p - a);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= -CLIP_EPS {
                if sp < -CLIP_EPS {
                    out.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= -CLIP_EPS {
                out.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    out
}

/// Intersection volume of two gravity-aligned boxes.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let poly = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&poly).max(0.0) * dz
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` in descending order; ties keep their input order.
pub fn score_order(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Greedy TP/FP flags, returned in the input order of `dets`.
///
/// Detections are visited by descending score; each one claims the
/// highest-IoU unmatched ground truth of its image and class if that IoU
/// reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut by_key: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id.as_str(), g.class)).or_default().push(j);
    }
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let Some(cands) = by_key.get(&(d.image_id.as_str(), d.class)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &j in cands {
            if taken[j] {
                continue;
            }
            let iou = iou3d(&d.bbox, &gts[j].bbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= iou_threshold {
                taken[j] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// Precision/recall over `flags` (already in descending score order) and the
/// area under the precision envelope.
pub fn average_precision(flags: &[bool], num_gt: usize, class: usize) -> Result<PRSeries> {
    if num_gt == 0 {
        return Err(Error::NoGroundTruth { class });
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(PRSeries { recall, precision, ap })
}

/// Unweighted mean over classes that have ground truth (`Some`).
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let valid: Vec<f64> = aps.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::invalid("classes", "no class has ground truth"));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    pub num_det: usize,
    /// `None` when the class has no ground truth and is left out of mAP.
    pub pr: Option<PRSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    pub map: f64,
}

/// Matches, accumulates and averages over every class seen in `dets` or
/// `gts`.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Result<EvalReport> {
    let flags = match_detections(dets, gts, iou_threshold);
    let order = score_order(dets.iter().map(|d| d.score));
    let classes: BTreeSet<usize> = dets
        .iter()
        .map(|d| d.class)
        .chain(gts.iter().map(|g| g.class))
        .collect();
    let mut reports = Vec::new();
    for class in classes {
        let num_gt = gts.iter().filter(|g| g.class == class).count();
        let class_flags: Vec<bool> = order
            .iter()
            .filter(|&&i| dets[i].class == class)
            .map(|&i| flags[i])
            .collect();
        let pr = match average_precision(&class_flags, num_gt, class) {
            Ok(pr) => Some(pr),
            Err(Error::NoGroundTruth { .. }) => None,
            Err(e) => return Err(e),
        };
        reports.push(ClassReport {
            class,
            num_gt,
            num_det: class_flags.len(),
            pr,
        });
    }
    let aps: Vec<Option<f64>> = reports.iter().map(|r| r.pr.as_ref().map(|p| p.ap)).collect();
    Ok(EvalReport {
        iou_threshold,
        map: mean_ap(&aps)?,
        classes: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn cube(x: f64, y: f64, yaw: f64) -> Box3D {
        Box3D::new(Vector3::new(x, y, 0.5), Vector3::new(1.0, 1.0, 1.0), yaw).unwrap()
    }

    fn det(img: &str, class: usize, score: f64, b: Box3D) -> Detection {
        Detection {
            image_id: img.into(),
            class,
            score,
            bbox: b,
        }
    }

    fn gt(img: &str, class: usize, b: Box3D) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            class,
            bbox: b,
        }
    }

    #[test]
    fn iou_simple_cases() {
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(0.0, 0.0, 0.0)), 1.0);
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(3.0, 0.0, 0.0)), 0.0);
        assert_eq!(iou3d(&cube(0.0, 0.0, 0.0), &cube(0.5, 0.0, 0.0)), 1.0 / 3.0);
    }

    #[test]
    fn iou_octagon() {
        // unit square against itself turned by 45 degrees: a regular octagon
        // with inradius 0.5, area 8 * tan(pi/8) * 0.25
        let want = 2.0 * (PI / 8.0).tan();
        let got = iou3d(&cube(0.0, 0.0, 0.0), &cube(0.0, 0.0, FRAC_PI_4));
        assert!((got - want / (2.0 - want)).abs() < 1e-12);
    }

    #[test]
    fn iou_vertical_offset() {
        let a = cube(0.0, 0.0, 0.3);
        let mut b = a;
        b.center.z += 0.75;
        assert!((iou3d(&a, &b) - 0.25 / 1.75).abs() < 1e-12);
    }

    #[test]
    fn iou_square_plan_half_turn() {
        let a = cube(0.2, 0.1, 0.3);
        let b = cube(0.2, 0.1, 0.3 + PI);
        assert!((iou3d(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_disjoint_is_empty() {
        let sq = |o: f64| {
            vec![
                Vector2::new(o, 0.0),
                Vector2::new(o + 1.0, 0.0),
                Vector2::new(o + 1.0, 1.0),
                Vector2::new(o, 1.0),
            ]
        };
        assert_eq!(polygon_area(&clip_convex(&sq(0.0), &sq(2.0))), 0.0);
        assert!((polygon_area(&clip_convex(&sq(0.0), &sq(0.25))) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_match_rule() {
        let g = cube(0.0, 0.0, 0.0);
        let dets = vec![det("a", 0, 0.4, g), det("a", 0, 0.9, g)];
        assert_eq!(match_detections(&dets, &[gt("a", 0, g)], 0.15), vec![false, true]);
    }

    #[test]
    fn class_and_image_must_agree() {
        let g = cube(0.0, 0.0, 0.0);
        let dets = vec![det("a", 1, 0.9, g), det("b", 0, 0.8, g)];
        assert_eq!(match_detections(&dets, &[gt("a", 0, g)], 0.15), vec![false, false]);
    }

    #[test]
    fn equal_scores_keep_input_order() {
        let g = cube(0.0, 0.0, 0.0);
        let dets = vec![det("a", 0, 0.5, g), det("a", 0, 0.5, g)];
        assert_eq!(match_detections(&dets, &[gt("a", 0, g)], 0.15), vec![true, false]);
    }

    #[test]
    fn hand_computed_ap() {
        assert_eq!(average_precision(&[true, true], 2, 0).unwrap().ap, 1.0);
        assert_eq!(average_precision(&[true, false], 1, 0).unwrap().ap, 1.0);
        let pr = average_precision(&[true, false, true], 2, 0).unwrap();
        assert!((pr.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(pr.recall, vec![0.5, 0.5, 1.0]);
        assert_eq!(average_precision(&[], 3, 0).unwrap().ap, 0.0);
        assert_eq!(average_precision(&[true], 0, 4), Err(Error::NoGroundTruth { class: 4 }));
    }

    #[test]
    fn mean_ap_excludes_missing_classes() {
        assert_eq!(mean_ap(&[Some(0.5)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[Some(1.0), None, Some(0.0)]).unwrap(), 0.5);
        assert!(mean_ap(&[None]).is_err());
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gts = vec![gt("a", 0, cube(0.0, 0.0, 0.0)), gt("b", 2, cube(1.0, 1.0, 0.2))];
        let dets: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.class, 1.0, g.bbox)).collect();
        assert_eq!(evaluate(&dets, &gts, 0.15).unwrap().map, 1.0);
        assert_eq!(evaluate(&[], &gts, 0.15).unwrap().map, 0.0);
    }

    #[test]
    fn detections_of_unlabelled_class_are_ignored() {
        let gts = vec![gt("a", 0, cube(0.0, 0.0, 0.0))];
        let dets = vec![
            det("a", 0, 0.9, cube(0.0, 0.0, 0.0)),
            det("a", 5, 0.99, cube(0.0, 0.0, 0.0)),
        ];
        let r = evaluate(&dets, &gts, 0.15).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.classes.iter().any(|c| c.class == 5 && c.pr.is_none()));
    }
}
