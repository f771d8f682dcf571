//! Decoding head outputs into detections and average precision.

use v2v_nn::functional::sigmoid;
use v2v_nn::Tensor;

use super::geometry::{decode_residuals, iou_bev, Anchor, Box3, RESIDUAL_DIM};
use super::loss::HEAD_CHANNELS;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3,
    /// objectness probability
    pub score: f64,
    pub cell: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    /// suppress a lower-scored box overlapping a kept one above this IoU
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.2,
            max_detections: 32,
        }
    }
}

/// Detections of every scene in a `[S, 8, G, G]` head output.
pub fn decode_detections(head: &Tensor, anchors: &[Anchor], cfg: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    let s = head.shape();
    if s.len() != 4 || s[1] != HEAD_CHANNELS || s[2] * s[3] != anchors.len() {
        return Err(CoreError::Shape(s.to_vec(), vec![0, HEAD_CHANNELS, 0, 0]));
    }
    let cells = anchors.len();
    let data = head.data();
    let mut out = Vec::with_capacity(s[0]);
    for si in 0..s[0] {
        let base = si * HEAD_CHANNELS * cells;
        let mut dets = Vec::new();
        for (p, anchor) in anchors.iter().enumerate() {
            let score = sigmoid(data[base + p]);
            if score < cfg.score_threshold {
                continue;
            }
            let mut delta = [0.0; RESIDUAL_DIM];
            for (k, d) in delta.iter_mut().enumerate() {
                *d = data[base + (1 + k) * cells + p];
            }
            dets.push(Detection {
                bbox: decode_residuals(&delta, anchor),
                score,
                cell: p,
            });
        }
        out.push(non_max_suppression(dets, cfg));
    }
    Ok(out)
}

/// Greedy suppression in descending score order (ties by cell index).
pub fn non_max_suppression(mut dets: Vec<Detection>, cfg: &DecodeConfig) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() >= cfg.max_detections {
            break;
        }
        if kept.iter().all(|k| iou_bev(&k.bbox, &d.bbox) <= cfg.nms_iou) {
            kept.push(d);
        }
    }
    kept
}

/// All-point interpolated average precision over a dataset.
///
/// Detections of all scenes are ranked by score; each is matched greedily to
/// the unmatched ground truth of its scene with the highest IoU, counting as a
/// true positive when that IoU reaches `iou_threshold`. With no ground truth
/// at all the result is 0 if there are detections and 1 otherwise.
pub fn average_precision(detections: &[Vec<Detection>], ground_truth: &[Vec<Box3>], iou_threshold: f64) -> Result<f64> {
    if detections.len() != ground_truth.len() {
        return Err(CoreError::Length {
            expected: ground_truth.len(),
            got: detections.len(),
        });
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    let mut ranked: Vec<(f64, usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().enumerate().map(move |(i, d)| (d.score, s, i)))
        .collect();
    if total_gt == 0 {
        return Ok(if ranked.is_empty() { 1.0 } else { 0.0 });
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, &(_, s, i)) in ranked.iter().enumerate() {
        let d = &detections[s][i];
        let mut best = (iou_threshold, None);
        for (gi, gt) in ground_truth[s].iter().enumerate() {
            if matched[s][gi] {
                continue;
            }
            let v = iou_bev(&d.bbox, gt);
            if v >= best.0 {
                best = (v, Some(gi));
            }
        }
        if let (_, Some(gi)) = best {
            matched[s][gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap.clamp(0.0, 1.0))
}
