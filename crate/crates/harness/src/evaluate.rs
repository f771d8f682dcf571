//! Evaluation of a trained pipeline at one channel point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use v2v_core::channel::{CsiMode, FlatChannelConfig, MultipathChannelConfig, NoiseReference};
use v2v_core::perception::{
    average_precision, decode_detections, fuse_maps, Anchor, Box3, DecodeConfig, Detection, PerceptionModel, Scene,
};
use v2v_core::transport::{transmit, Link};
use v2v_core::weighting::{apply_weight, split_agents, WeightingNet};
use v2v_nn::Tensor;

use crate::config::EvaluationConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::FusionMode;
use crate::seeds;

/// Channel a collaborator's features cross during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ChannelPoint {
    Ideal,
    /// flat Rician at unit distance with perfect CSI
    FlatSnr { snr_db: f64 },
    /// flat Rician over the ego-collaborator distance with perturbed CSI;
    /// `snr_db` holds at 1 m
    PathLoss { n: f64, snr_db: f64 },
    /// multi-path OFDM with least-squares estimation
    Ofdm { pilots: usize, snr_db: f64 },
}

impl ChannelPoint {
    pub fn snr_db(&self) -> f64 {
        match *self {
            ChannelPoint::Ideal => f64::INFINITY,
            ChannelPoint::FlatSnr { snr_db }
            | ChannelPoint::PathLoss { snr_db, .. }
            | ChannelPoint::Ofdm { snr_db, .. } => snr_db,
        }
    }

    pub fn path_loss_n(&self) -> Option<f64> {
        match *self {
            ChannelPoint::PathLoss { n, .. } => Some(n),
            _ => None,
        }
    }

    pub fn pilot_count(&self) -> Option<usize> {
        match *self {
            ChannelPoint::Ofdm { pilots, .. } => Some(pilots),
            _ => None,
        }
    }

    /// Link for a collaborator at `distance` meters (clamped to at least 1).
    pub fn link(&self, distance: f64, eval: &EvaluationConfig) -> Link {
        match *self {
            ChannelPoint::Ideal => Link::Ideal,
            ChannelPoint::FlatSnr { snr_db } => Link::Flat(FlatChannelConfig::rician(eval.rician_k, snr_db)),
            ChannelPoint::PathLoss { n, snr_db } => Link::Flat(FlatChannelConfig {
                p0: eval.p0,
                distance: distance.max(1.0),
                path_loss_exponent: n,
                rician_k: eval.rician_k,
                snr_db,
                csi: CsiMode::Perturbed {
                    variance: eval.csi_variance,
                },
                noise_reference: NoiseReference::ReferenceGain(eval.p0.sqrt()),
            }),
            ChannelPoint::Ofdm { pilots, snr_db } => {
                Link::Multipath(MultipathChannelConfig::with_pilots(pilots, snr_db))
            }
        }
    }
}

/// Clean features of one test scene, computed once per backbone.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub objects: Vec<Box3>,
    pub ego: Tensor,
    pub shared: Vec<Tensor>,
    /// ego-collaborator distances, aligned with `shared`
    pub distances: Vec<f64>,
}

pub fn prepare_scenes(model: &PerceptionModel, scenes: &[Scene]) -> Result<Vec<EvalScene>> {
    scenes
        .iter()
        .map(|s| {
            let f = model.encode_eval(&s.rasters()?)?;
            let (ego, shared) = split_agents(&f);
            let e = &s.agents[0];
            let distances = s.agents[1..].iter().map(|a| (a.x - e.x).hypot(a.y - e.y)).collect();
            Ok(EvalScene {
                objects: s.objects.clone(),
                ego,
                shared,
                distances,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub ap_03: f64,
    pub ap_07: f64,
    pub feature_mse: Option<f64>,
    pub mean_weight: Option<f64>,
}

pub struct Evaluator<'a> {
    pub model: &'a PerceptionModel,
    pub weighting: Option<&'a WeightingNet>,
    pub anchors: &'a [Anchor],
    pub config: &'a EvaluationConfig,
    pub seed: u64,
}

struct SceneResult {
    detections: Vec<Vec<Detection>>,
    mse_sum: f64,
    w_sum: f64,
    sent: usize,
}

impl Evaluator<'_> {
    fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            score_threshold: self.config.score_threshold,
            nms_iou: self.config.nms_iou,
            ..DecodeConfig::default()
        }
    }

    fn evaluate_scene(&self, scene: &EvalScene, point: &ChannelPoint, mode: FusionMode, seed: u64) -> Result<SceneResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = self.config.draws_per_scene;
        let (mut mse_sum, mut w_sum, mut sent) = (0.0, 0.0, 0usize);
        let mut fused = Vec::with_capacity(draws);
        for _ in 0..draws {
            let mut received = Vec::with_capacity(scene.shared.len());
            if mode != FusionMode::EgoOnly {
                for (k, f) in scene.shared.iter().enumerate() {
                    let link = point.link(scene.distances[k], self.config);
                    let fhat = transmit(k + 1, f, &link, &mut rng)?.feature;
                    mse_sum += fhat.mean_squared_error(f)?;
                    sent += 1;
                    let fin = match (mode, self.weighting) {
                        (FusionMode::Weighted, Some(net)) => {
                            let w = net.weight(&scene.ego, &fhat)?;
                            w_sum += w;
                            apply_weight(w, &fhat)
                        }
                        _ => fhat,
                    };
                    received.push(fin);
                }
            }
            fused.push(fuse_maps(&scene.ego, &received)?);
        }
        let refs: Vec<&Tensor> = fused.iter().collect();
        let head = self.model.head_eval(&Tensor::stack(&refs)?)?;
        Ok(SceneResult {
            detections: decode_detections(&head, self.anchors, &self.decode_config())?,
            mse_sum,
            w_sum,
            sent,
        })
    }

    /// AP over every (scene, draw) pair, plus feature error and mean weight
    /// over every transmitted map. Each scene draws from its own stream, so
    /// scenes run in parallel and results do not depend on the thread count.
    pub fn evaluate(&self, scenes: &[EvalScene], point: &ChannelPoint, mode: FusionMode) -> Result<EvalOutcome> {
        if mode == FusionMode::Weighted && self.weighting.is_none() {
            return Err(HarnessError::MissingArtifact("weighted mode needs a weighting network".into()));
        }
        let point_tag = format!("{point:?}");
        let per_scene: Vec<SceneResult> = scenes
            .par_iter()
            .enumerate()
            .map(|(si, scene)| {
                let seed = seeds::derive(self.seed, &point_tag, si as u64);
                self.evaluate_scene(scene, point, mode, seed)
            })
            .collect::<Result<_>>()?;
        let mut detections: Vec<Vec<Detection>> = Vec::new();
        let mut truth: Vec<Vec<Box3>> = Vec::new();
        let (mut mse_sum, mut w_sum, mut sent) = (0.0, 0.0, 0usize);
        for (scene, r) in scenes.iter().zip(per_scene) {
            for dets in r.detections {
                detections.push(dets);
                truth.push(scene.objects.clone());
            }
            mse_sum += r.mse_sum;
            w_sum += r.w_sum;
            sent += r.sent;
        }
        let avg = |s: f64| (sent > 0).then(|| s / sent as f64);
        Ok(EvalOutcome {
            ap_03: average_precision(&detections, &truth, 0.3)?,
            ap_07: average_precision(&detections, &truth, 0.7)?,
            feature_mse: avg(mse_sum),
            mean_weight: if mode == FusionMode::Weighted { avg(w_sum) } else { None },
        })
    }
}
