//! Anchor assignment and the supervised detection loss.
//!
//! `L = (beta_reg * sum_pos sum_i smooth_l1(d_pred_i - d_gt_i)
//!      + beta_cls * sum_{pos, neg} focal) / max(N_pos, 1)`.
//!
//! The focal term of a positive anchor is `-alpha (1-q)^gamma ln q` with `q`
//! the predicted objectness; a negative anchor uses the same expression with
//! `q` replaced by the probability of background, `1 - q`.

use v2v_nn::functional::{focal_loss, focal_loss_dq, sigmoid, smooth_l1, smooth_l1_grad};
use v2v_nn::{CustomOp, Graph, LossParams, Tensor, Var};

use super::geometry::{box_residuals, iou_bev, Anchor, Box3, RESIDUAL_DIM};
use crate::error::{CoreError, Result};

/// Head channels: objectness logit followed by the box residuals.
pub const HEAD_CHANNELS: usize = 1 + RESIDUAL_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for AssignThresholds {
    fn default() -> Self {
        AssignThresholds {
            positive: 0.5,
            negative: 0.3,
        }
    }
}

/// Per-anchor training targets of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<Label>,
    /// regression targets, meaningful only for positive anchors
    pub residuals: Vec<[f64; RESIDUAL_DIM]>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Positive).count()
    }
}

/// Anchors with IoU >= `positive` to some box are positive, as is the best
/// anchor of every box; anchors whose best IoU is <= `negative` are negative;
/// the rest are ignored.
pub fn assign_targets(objects: &[Box3], anchors: &[Anchor], thr: AssignThresholds) -> Result<Targets> {
    let mut labels = vec![Label::Negative; anchors.len()];
    let mut residuals = vec![[0.0; RESIDUAL_DIM]; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_obj = vec![usize::MAX; anchors.len()];
    for (oi, o) in objects.iter().enumerate() {
        o.validate()?;
        for (ai, a) in anchors.iter().enumerate() {
            let v = iou_bev(o, &a.bbox);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_obj[ai] = oi;
            }
        }
    }
    for ai in 0..anchors.len() {
        if best_iou[ai] >= thr.positive {
            labels[ai] = Label::Positive;
            residuals[ai] = box_residuals(&objects[best_obj[ai]], &anchors[ai])?;
        } else if best_iou[ai] > thr.negative {
            labels[ai] = Label::Ignore;
        }
    }
    for o in objects {
        // best anchor by IoU, falling back to the nearest center
        let mut pick = 0;
        let mut key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (ai, a) in anchors.iter().enumerate() {
            let k = (iou_bev(o, &a.bbox), -(a.bbox.x - o.x).hypot(a.bbox.y - o.y));
            if k > key {
                key = k;
                pick = ai;
            }
        }
        if anchors.is_empty() {
            break;
        }
        labels[pick] = Label::Positive;
        residuals[pick] = box_residuals(o, &anchors[pick])?;
    }
    Ok(Targets { labels, residuals })
}

/// Loss value and its gradient with respect to the head output.
pub fn detection_loss_value(head: &Tensor, targets: &[Targets], params: &LossParams) -> Result<(f64, Tensor)> {
    let s = head.shape();
    if s.len() != 4 || s[1] != HEAD_CHANNELS || s[0] != targets.len() {
        return Err(CoreError::Shape(s.to_vec(), vec![targets.len(), HEAD_CHANNELS, 0, 0]));
    }
    let cells = s[2] * s[3];
    if let Some(t) = targets.iter().find(|t| t.labels.len() != cells) {
        return Err(CoreError::Length {
            expected: cells,
            got: t.labels.len(),
        });
    }
    let n_pos = targets.iter().map(Targets::num_positive).sum::<usize>().max(1) as f64;
    let data = head.data();
    let mut grad = vec![0.0; data.len()];
    let mut reg = 0.0;
    let mut cls = 0.0;
    for (si, t) in targets.iter().enumerate() {
        let base = si * HEAD_CHANNELS * cells;
        for (p, label) in t.labels.iter().enumerate() {
            let li = base + p;
            let q = sigmoid(data[li]);
            let dq_dlogit = q * (1.0 - q);
            match label {
                Label::Positive => {
                    cls += focal_loss(q, params);
                    grad[li] += params.beta_cls * focal_loss_dq(q, params) * dq_dlogit / n_pos;
                    for (k, &target) in t.residuals[p].iter().enumerate() {
                        let ri = base + (1 + k) * cells + p;
                        let diff = data[ri] - target;
                        reg += smooth_l1(diff);
                        grad[ri] += params.beta_reg * smooth_l1_grad(diff) / n_pos;
                    }
                }
                Label::Negative => {
                    cls += focal_loss(1.0 - q, params);
                    grad[li] -= params.beta_cls * focal_loss_dq(1.0 - q, params) * dq_dlogit / n_pos;
                }
                Label::Ignore => {}
            }
        }
    }
    let loss = (params.beta_reg * reg + params.beta_cls * cls) / n_pos;
    Ok((loss, Tensor::new(s, grad)?))
}

struct DetectionLossOp {
    grad: Tensor,
}

impl CustomOp for DetectionLossOp {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(self.grad.scale(grad.data()[0]))]
    }
}

/// Records the detection loss of a `[S, 8, G, G]` head output.
pub fn detection_loss(g: &mut Graph, head: Var, targets: &[Targets], params: &LossParams) -> Result<Var> {
    let (loss, grad) = detection_loss_value(g.value(head), targets, params)?;
    Ok(g.custom(&[head], Tensor::scalar(loss), Box::new(DetectionLossOp { grad })))
}
