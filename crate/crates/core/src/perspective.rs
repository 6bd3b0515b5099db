//! Perspective points: the projected 3D center plus the 8 projected corners of
//! a box, expressed in the normalised frame of a doubled RoI.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::box3d::{corners, Box3D};
use crate::camera::Camera;
use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 9;
pub const NUM_COORDS: usize = 2 * NUM_POINTS;

/// Endpoints closer than this are treated as the same point.
pub const LINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoI {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let r = Self { x0, y0, x1, y1 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(Error::invalid("roi", "requires x1 > x0 and y1 > y0"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Scales the box about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let (hw, hh) = (0.5 * factor * self.width(), 0.5 * factor * self.height());
        Self {
            x0: c.x - hw,
            y0: c.y - hh,
            x1: c.x + hw,
            y1: c.y + hh,
        }
    }

    /// Tight bounds of a point set.
    pub fn bounding<'a>(points: impl IntoIterator<Item = &'a Vector2<f64>>) -> Result<Self> {
        let mut r = Self {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for p in points {
            r.x0 = r.x0.min(p.x);
            r.y0 = r.y0.min(p.y);
            r.x1 = r.x1.max(p.x);
            r.y1 = r.y1.max(p.y);
        }
        r.validate()?;
        Ok(r)
    }
}

/// Same center, doubled width and height.
pub fn extended_roi(roi: &RoI) -> RoI {
    roi.scaled(2.0)
}

/// Nine 2D points `[center, a, b, c, d, e, f, g, h]` in the normalised
/// extended-RoI frame, with a per-point flag recording whether clipping into
/// `[0, 1]^2` changed the point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectivePoints {
    pub points: [[f64; 2]; NUM_POINTS],
    pub clipped: [bool; NUM_POINTS],
}

impl PerspectivePoints {
    /// Unclipped points (all flags false).
    pub fn from_points(points: [[f64; 2]; NUM_POINTS]) -> Self {
        Self {
            points,
            clipped: [false; NUM_POINTS],
        }
    }

    pub fn point(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.points[i][0], self.points[i][1])
    }

    /// Coordinates flattened as `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> [f64; NUM_COORDS] {
        let mut out = [0.0; NUM_COORDS];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn from_flat(x: &[f64]) -> Self {
        let mut points = [[0.0; 2]; NUM_POINTS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = [x[2 * i], x[2 * i + 1]];
        }
        Self::from_points(points)
    }

    pub fn any_clipped(&self) -> bool {
        self.clipped.iter().any(|c| *c)
    }
}

/// Maps a pixel into the extended-RoI frame without clipping.
pub fn normalize_pixel(p: &Vector2<f64>, roi: &RoI) -> Vector2<f64> {
    let ext = extended_roi(roi);
    Vector2::new((p.x - ext.x0) / ext.width(), (p.y - ext.y0) / ext.height())
}

pub fn denormalize_pixel(p: &Vector2<f64>, roi: &RoI) -> Vector2<f64> {
    let ext = extended_roi(roi);
    Vector2::new(p.x * ext.width() + ext.x0, p.y * ext.height() + ext.y0)
}

/// Clamps each coordinate into `[0, 1]`; the flag is set if anything moved.
pub fn clip_unit(p: Vector2<f64>) -> (Vector2<f64>, bool) {
    let q = p.map(|v| v.clamp(0.0, 1.0));
    (q, q != p)
}

pub fn normalize_points(pixels: &[Vector2<f64>; NUM_POINTS], roi: &RoI) -> PerspectivePoints {
    let mut out = PerspectivePoints::from_points([[0.0; 2]; NUM_POINTS]);
    for (i, p) in pixels.iter().enumerate() {
        let (q, clipped) = clip_unit(normalize_pixel(p, roi));
        out.points[i] = [q.x, q.y];
        out.clipped[i] = clipped;
    }
    out
}

pub fn denormalize_points(pp: &PerspectivePoints, roi: &RoI) -> [Vector2<f64>; NUM_POINTS] {
    std::array::from_fn(|i| denormalize_pixel(&pp.point(i), roi))
}

/// Pixel projections of the box center followed by its 8 corners.
pub fn project_box_pixels(b: &Box3D, cam: &Camera) -> Result<[Vector2<f64>; NUM_POINTS]> {
    let c = corners(b);
    let mut out = [Vector2::zeros(); NUM_POINTS];
    out[0] = cam.project_point(&b.center)?;
    for i in 0..8 {
        out[i + 1] = cam.project_point(&c[i])?;
    }
    Ok(out)
}

/// Ground-truth perspective points of a box inside `roi`.
pub fn gt_perspective_points(b: &Box3D, cam: &Camera, roi: &RoI) -> Result<PerspectivePoints> {
    roi.validate()?;
    Ok(normalize_points(&project_box_pixels(b, cam)?, roi))
}

/// Homogeneous intersection of line `p1 p2` with line `q1 q2`.
///
/// Both lines are scaled to unit normals first, so the returned `w` is the
/// sine of the angle between them and `|w| ~ 0` marks a point at infinity
/// whose `(x, y)` is the common direction.
pub fn line_intersection(
    p1: &Vector2<f64>,
    p2: &Vector2<f64>,
    q1: &Vector2<f64>,
    q2: &Vector2<f64>,
) -> Result<Vector3<f64>> {
    let l1 = unit_line(p1, p2)?;
    let l2 = unit_line(q1, q2)?;
    Ok(l1.cross(&l2))
}

/// Homogeneous line through two points with `a^2 + b^2 = 1`.
pub fn unit_line(p: &Vector2<f64>, q: &Vector2<f64>) -> Result<Vector3<f64>> {
    if (p - q).norm() < LINE_EPS {
        return Err(Error::DegenerateLine);
    }
    let l = p.push(1.0).cross(&q.push(1.0));
    Ok(l / l.xy().norm())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-class point templates (raw logits, squashed by a sigmoid) and mixing
/// coefficients (raw logits, normalised by a softmax over the K templates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateBankRepr", into = "TemplateBankRepr")]
pub struct TemplateBank {
    classes: usize,
    per_class: usize,
    /// Flat `C x K x 2 x 9`.
    templates: Vec<f64>,
    /// Flat `C x K`.
    coeff_logits: Vec<f64>,
}

impl TemplateBank {
    pub fn new(classes: usize, per_class: usize, templates: Vec<f64>, coeff_logits: Vec<f64>) -> Result<Self> {
        if classes == 0 || per_class == 0 {
            return Err(Error::invalid("C/K", "must be positive"));
        }
        if templates.len() != classes * per_class * NUM_COORDS {
            return Err(Error::invalid("templates", "expected C*K*2*9 values"));
        }
        if coeff_logits.len() != classes * per_class {
            return Err(Error::invalid("coeff_logits", "expected C*K values"));
        }
        if !templates.iter().chain(&coeff_logits).all(|v| v.is_finite()) {
            return Err(Error::invalid("templates", "logits must be finite"));
        }
        Ok(Self {
            classes,
            per_class,
            templates,
            coeff_logits,
        })
    }

    pub fn zeros(classes: usize, per_class: usize) -> Result<Self> {
        Self::new(
            classes,
            per_class,
            vec![0.0; classes * per_class * NUM_COORDS],
            vec![0.0; classes * per_class],
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    fn offset(&self, class: usize, k: usize) -> usize {
        (class * self.per_class + k) * NUM_COORDS
    }

    /// Raw template logits for `(class, k)`, laid out as `[x_0..x_8, y_0..y_8]`.
    pub fn template(&self, class: usize, k: usize) -> &[f64] {
        let o = self.offset(class, k);
        &self.templates[o..o + NUM_COORDS]
    }

    pub fn template_mut(&mut self, class: usize, k: usize) -> &mut [f64] {
        let o = self.offset(class, k);
        &mut self.templates[o..o + NUM_COORDS]
    }

    pub fn coeff_logits(&self, class: usize) -> &[f64] {
        let o = class * self.per_class;
        &self.coeff_logits[o..o + self.per_class]
    }

    pub fn coeff_logits_mut(&mut self, class: usize) -> &mut [f64] {
        let o = class * self.per_class;
        &mut self.coeff_logits[o..o + self.per_class]
    }

    pub fn weights(&self, class: usize) -> Vec<f64> {
        softmax(self.coeff_logits(class))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes {
            return Err(Error::invalid(
                "class",
                format!("{class} out of range for {} classes", self.classes),
            ));
        }
        Ok(())
    }

    /// Mixture with the bank's own coefficients.
    pub fn mix(&self, class: usize) -> Result<PerspectivePoints> {
        self.check_class(class)?;
        self.mix_with(class, self.coeff_logits(class))
    }

    /// Mixture with externally supplied coefficient logits (one per template).
    pub fn mix_with(&self, class: usize, coeff_logits: &[f64]) -> Result<PerspectivePoints> {
        self.check_class(class)?;
        if coeff_logits.len() != self.per_class {
            return Err(Error::invalid("coeff_logits", "expected K values"));
        }
        let w = softmax(coeff_logits);
        let mut points = [[0.0; 2]; NUM_POINTS];
        for (k, wk) in w.iter().enumerate() {
            let t = self.template(class, k);
            for (i, p) in points.iter_mut().enumerate() {
                p[0] += wk * sigmoid(t[i]);
                p[1] += wk * sigmoid(t[NUM_POINTS + i]);
            }
        }
        Ok(PerspectivePoints::from_points(points))
    }
}

/// Template-mixture prediction for `class`.
pub fn mix_templates(bank: &TemplateBank, class: usize) -> Result<PerspectivePoints> {
    bank.mix(class)
}

#[derive(Serialize, Deserialize)]
struct TemplateBankRepr {
    #[serde(rename = "C")]
    classes: usize,
    #[serde(rename = "K")]
    per_class: usize,
    templates: Vec<Vec<[[f64; NUM_POINTS]; 2]>>,
    coeff_logits: Vec<Vec<f64>>,
}

impl TryFrom<TemplateBankRepr> for TemplateBank {
    type Error = Error;

    fn try_from(r: TemplateBankRepr) -> Result<Self> {
        if r.templates.len() != r.classes || r.templates.iter().any(|c| c.len() != r.per_class) {
            return Err(Error::invalid("templates", "shape must be C x K x 2 x 9"));
        }
        if r.coeff_logits.len() != r.classes || r.coeff_logits.iter().any(|c| c.len() != r.per_class) {
            return Err(Error::invalid("coeff_logits", "shape must be C x K"));
        }
        let templates = r
            .templates
            .iter()
            .flatten()
            .flat_map(|t| t.iter().flatten().copied())
            .collect();
        let coeff = r.coeff_logits.into_iter().flatten().collect();
        TemplateBank::new(r.classes, r.per_class, templates, coeff)
    }
}

impl From<TemplateBank> for TemplateBankRepr {
    fn from(b: TemplateBank) -> Self {
        let templates = (0..b.classes)
            .map(|c| {
                (0..b.per_class)
                    .map(|k| {
                        let t = b.template(c, k);
                        [
                            std::array::from_fn(|i| t[i]),
                            std::array::from_fn(|i| t[NUM_POINTS + i]),
                        ]
                    })
                    .collect()
            })
            .collect();
        let coeff_logits = (0..b.classes).map(|c| b.coeff_logits(c).to_vec()).collect();
        Self {
            classes: b.classes,
            per_class: b.per_class,
            templates,
            coeff_logits,
        }
    }
}
