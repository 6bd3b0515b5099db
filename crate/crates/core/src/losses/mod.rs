//! Training objectives that act on perspective points and box attributes.
//!
//! Every loss returns its value together with an analytic gradient; the
//! [`gradcheck`] module verifies those gradients against central differences.

mod attr;
pub mod gradcheck;
mod perspective_loss;
mod point;
mod proj;

pub use attr::{loss_3d, Attr3D, Loss3D};
pub use gradcheck::grad_check;
pub use perspective_loss::{loss_perspective, PerspectiveLoss, DEGENERATE_PENALTY, HUBER_DELTA, PARALLEL_EPS};
pub use point::loss_pp;
pub use proj::{loss_proj, loss_proj_params, project_params, ProjectedPoints};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group weights (`pp`, `p`, `3d`, `proj`) and the sub-weights inside the
/// perspective and 3D groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pp: f64,
    pub lambda_p: f64,
    pub lambda_3d: f64,
    pub lambda_proj: f64,
    pub lambda_d1: f64,
    pub lambda_d2: f64,
    pub lambda_grav: f64,
    pub lambda_dis: f64,
    pub lambda_size: f64,
    pub lambda_ori: f64,
    pub lambda_box3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pp: 1.0,
            lambda_p: 1.0,
            lambda_3d: 1.0,
            lambda_proj: 1.0,
            lambda_d1: 1.0,
            lambda_d2: 1.0,
            lambda_grav: 1.0,
            lambda_dis: 1.0,
            lambda_size: 1.0,
            lambda_ori: 1.0,
            lambda_box3d: 1.0,
        }
    }
}

impl LossWeights {
    fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("lambda_pp", self.lambda_pp),
            ("lambda_p", self.lambda_p),
            ("lambda_3d", self.lambda_3d),
            ("lambda_proj", self.lambda_proj),
            ("lambda_d1", self.lambda_d1),
            ("lambda_d2", self.lambda_d2),
            ("lambda_grav", self.lambda_grav),
            ("lambda_dis", self.lambda_dis),
            ("lambda_size", self.lambda_size),
            ("lambda_ori", self.lambda_ori),
            ("lambda_box3d", self.lambda_box3d),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "weights must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Weights in effect for a phase; warm-up drops the perspective and
    /// reprojection groups.
    pub fn for_phase(&self, phase: Phase) -> Self {
        match phase {
            Phase::Full => *self,
            Phase::Warmup => Self {
                lambda_p: 0.0,
                lambda_proj: 0.0,
                ..*self
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Full,
}

/// Raw (unweighted) loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pp: f64,
    pub d1: f64,
    pub d2: f64,
    pub grav: f64,
    pub dis: f64,
    pub size: f64,
    pub ori: f64,
    pub box3d: f64,
    pub proj: f64,
}

/// Components plus the weighted group sums and their total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: LossComponents,
    pub pp: f64,
    pub p: f64,
    pub l3d: f64,
    pub proj: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "pp,d1,d2,grav,dis,size,ori,box3d,proj,total";

    pub fn csv_fields(&self) -> String {
        let c = &self.components;
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            c.pp, c.d1, c.d2, c.grav, c.dis, c.size, c.ori, c.box3d, c.proj, self.total
        )
    }
}

/// Weighted sum of the loss terms under the given phase schedule.
pub fn total_loss(c: &LossComponents, weights: &LossWeights, phase: Phase) -> LossBreakdown {
    let w = weights.for_phase(phase);
    let p = w.lambda_d1 * c.d1 + w.lambda_d2 * c.d2 + w.lambda_grav * c.grav;
    let l3d = w.lambda_dis * c.dis + w.lambda_size * c.size + w.lambda_ori * c.ori + w.lambda_box3d * c.box3d;
    let pp = w.lambda_pp * c.pp;
    let p = w.lambda_p * p;
    let l3d = w.lambda_3d * l3d;
    let proj = w.lambda_proj * c.proj;
    LossBreakdown {
        components: *c,
        pp,
        p,
        l3d,
        proj,
        total: pp + p + l3d + proj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_components_zero_total() {
        let b = total_loss(&LossComponents::default(), &LossWeights::default(), Phase::Full);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn unit_weights_sum_groups() {
        let c = LossComponents {
            pp: 0.1,
            d1: 0.2,
            dis: 0.3,
            proj: 0.4,
            ..Default::default()
        };
        let b = total_loss(&c, &LossWeights::default(), Phase::Full);
        assert!((b.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn warmup_drops_perspective_and_projection() {
        let c = LossComponents {
            pp: 0.1,
            d1: 0.5,
            grav: 0.25,
            size: 0.3,
            proj: 0.4,
            ..Default::default()
        };
        let w = LossWeights::default();
        let warm = total_loss(&c, &w, Phase::Warmup);
        assert_eq!(warm.p, 0.0);
        assert_eq!(warm.proj, 0.0);
        assert!((warm.total - 0.4).abs() < 1e-15);
        let full = total_loss(&c, &w, Phase::Full);
        assert!((full.total - 1.55).abs() < 1e-15);
    }

    #[test]
    fn weights_parse_with_defaults() {
        let w: LossWeights = toml::from_str("lambda_p = 0.5\n").unwrap();
        assert_eq!(w.lambda_p, 0.5);
        assert_eq!(w.lambda_pp, 1.0);
        let w: LossWeights = serde_json::from_str(r#"{"lambda_ori": 2.0}"#).unwrap();
        assert_eq!(w.lambda_ori, 2.0);
        assert!(toml::from_str::<LossWeights>("lambda_bogus = 1.0\n").is_err());
        let bad = LossWeights {
            lambda_size: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
