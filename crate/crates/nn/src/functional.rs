//! Scalar and slice-level reference functions shared by the graph ops and by
//! loss code elsewhere in the workspace.

use crate::error::{NnError, Result};
use crate::graph::KL_FLOOR;

/// Floor applied to probabilities before taking logarithms in the focal loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Focal and box-regression weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    /// focal balance weight, in (0, 1)
    pub alpha: f64,
    /// focusing exponent, >= 0
    pub gamma: f64,
    pub beta_reg: f64,
    pub beta_cls: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            alpha: 0.25,
            gamma: 2.0,
            beta_reg: 2.0,
            beta_cls: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.gamma >= 0.0
            && self.beta_reg > 0.0
            && self.beta_cls > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidShape(format!("invalid loss parameters {self:?}")))
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Natural log of the softmax, computed as `x - max - ln sum exp(x - max)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

/// `sum p ln(p/q)` with `0 ln 0 = 0` and `q` floored at `1e-12`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NnError::mismatch("kl_divergence", &[p.len()], &[q.len()]));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi.ln() - qi.max(KL_FLOOR).ln())
            } else {
                0.0
            }
        })
        .sum())
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `-alpha (1 - q)^gamma ln q` with `q` floored at [`PROB_FLOOR`].
pub fn focal_loss(q: f64, params: &LossParams) -> f64 {
    let q = q.clamp(PROB_FLOOR, 1.0);
    -params.alpha * (1.0 - q).powf(params.gamma) * q.ln()
}

/// Derivative of [`focal_loss`] with respect to `q`.
pub fn focal_loss_dq(q: f64, params: &LossParams) -> f64 {
    if q < PROB_FLOOR {
        return 0.0;
    }
    let one_m = 1.0 - q;
    let pow_g1 = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * one_m.powf(params.gamma - 1.0)
    };
    params.alpha * (pow_g1 * q.ln() - one_m.powf(params.gamma) / q)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
