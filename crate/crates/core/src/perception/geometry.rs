//! Boxes, anchors, residual encoding and bird's-eye-view IoU.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Center `(x, y, z)`, size `(w, l, h)` and heading `theta`, in meters and
/// radians. At `theta = 0`, `w` extends along x and `l` along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3 {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.x, self.y, self.z, self.w, self.l, self.h, self.theta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidBox(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(CoreError::InvalidBox(format!("nonpositive size in {self:?}")));
        }
        Ok(())
    }

    /// `true` if the point lies inside the rotated footprint.
    pub fn contains_bev(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        // rotate into the box frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.l / 2.0
    }
}

/// Prior box attached to one head cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: Box3,
}

impl Anchor {
    pub fn new(bbox: Box3) -> Result<Self> {
        bbox.validate()?;
        Ok(Anchor { bbox })
    }

    /// Footprint diagonal `sqrt(w^2 + l^2)`.
    pub fn diagonal(&self) -> f64 {
        self.bbox.w.hypot(self.bbox.l)
    }
}

pub const RESIDUAL_DIM: usize = 7;

/// `[(x-xa)/d, (y-ya)/d, (z-za)/ha, ln(w/wa), ln(l/la), ln(h/ha), sin(theta-theta_a)]`
/// with `d` the anchor diagonal.
pub fn box_residuals(gt: &Box3, anchor: &Anchor) -> Result<[f64; RESIDUAL_DIM]> {
    gt.validate()?;
    anchor.bbox.validate()?;
    let a = &anchor.bbox;
    let d = anchor.diagonal();
    Ok([
        (gt.x - a.x) / d,
        (gt.y - a.y) / d,
        (gt.z - a.z) / a.h,
        (gt.w / a.w).ln(),
        (gt.l / a.l).ln(),
        (gt.h / a.h).ln(),
        (gt.theta - a.theta).sin(),
    ])
}

/// Inverse of [`box_residuals`]; the heading is recovered with `asin`, so
/// it is exact for heading differences inside `(-pi/2, pi/2)`. The sine
/// residual is clamped to `[-1, 1]`.
pub fn decode_residuals(delta: &[f64; RESIDUAL_DIM], anchor: &Anchor) -> Box3 {
    let a = &anchor.bbox;
    let d = anchor.diagonal();
    Box3 {
        x: a.x + delta[0] * d,
        y: a.y + delta[1] * d,
        z: a.z + delta[2] * a.h,
        w: a.w * delta[3].exp(),
        l: a.l * delta[4].exp(),
        h: a.h * delta[5].exp(),
        theta: a.theta + delta[6].clamp(-1.0, 1.0).asin(),
    }
}

/// Axis-aligned bird's-eye-view IoU over `(x, y, w, l)`; heading ignored.
pub fn iou_bev(a: &Box3, b: &Box3) -> f64 {
    let overlap = |c0: f64, s0: f64, c1: f64, s1: f64| {
        let lo = (c0 - s0 / 2.0).max(c1 - s1 / 2.0);
        let hi = (c0 + s0 / 2.0).min(c1 + s1 / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.x, a.w, b.x, b.w) * overlap(a.y, a.l, b.y, b.l);
    let union = a.w * a.l + b.w * b.l - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
