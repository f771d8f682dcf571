//! CAV-level adaptive weighting.
//!
//! A small network scores each received feature map against the ego feature
//! map of the same scene and outputs one weight `W` in (0, 1) per collaborator.
//! It is trained without labels: a lightly distorted copy of a shared feature
//! (`f+`, 30 dB) and a heavily distorted one (`f-`, -10 dB) are weighted and
//! compared with the clean feature `f` through
//!
//! `L = T^2 (lambda_pos * sum_k KL[S(W+ f+) || S(f)] + lambda_neg * sum_k KL[S(W- f-) || S(f)]) / K`
//!
//! where `S(x) = softmax(x / T)` over all `C*H*W` elements of one map. The
//! `T^2` factor keeps gradient magnitudes independent of `T`; without it the
//! optimizer's L2 term outweighs the loss at `T = 20`.
//! With `T = 1` the best `W-` on a trained encoder stays near 1 because the
//! clean softmax is peaked on a few cells; a larger `T` moves the optimum
//! toward `cov(f-, f) / var(f-)`, which falls with the SNR.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use v2v_nn::functional::softmax;
use v2v_nn::{AdamConfig, ConvBnRelu, Graph, Linear, Mode, ParamStore, Tensor, Var};

use crate::channel::FlatChannelConfig;
use crate::error::{CoreError, Result};
use crate::perception::model::{FEATURE_CHANNELS, FEATURE_SIZE};
use crate::perception::{PerceptionModel, Scene};
use crate::transport::{transmit, Link};

const HIDDEN: usize = 64;
const CONV_CHANNELS: usize = 2 * FEATURE_CHANNELS;

/// Four conv-bn-relu blocks over the concatenated `(ego, received)` pair,
/// a dense-relu layer and a two-logit output; `W` is the first softmax entry.
#[derive(Debug)]
pub struct WeightingNet {
    pub store: ParamStore,
    pub layers: WeightingLayers,
}

/// Layer handles of a [`WeightingNet`].
#[derive(Clone, Debug)]
pub struct WeightingLayers {
    pub blocks: [ConvBnRelu; 4],
    pub hidden: Linear,
    pub output: Linear,
}

impl WeightingLayers {
    /// Logits `[B, 2]` for ego and received maps `[B, C, H, W]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, ego: Var, received: Var, mode: Mode) -> Result<Var> {
        if g.shape(ego) != g.shape(received) {
            return Err(CoreError::Shape(g.shape(ego).to_vec(), g.shape(received).to_vec()));
        }
        let mut x = g.concat(ego, received)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, mode)?;
        }
        let x = g.flatten(x)?;
        let x = self.hidden.forward(g, store, x)?;
        let x = g.relu(x);
        Ok(self.output.forward(g, store, x)?)
    }

    /// `W` per row, shape `[B]`.
    pub fn weight_forward(&self, g: &mut Graph, store: &ParamStore, ego: Var, received: Var, mode: Mode) -> Result<Var> {
        let z = self.logits(g, store, ego, received, mode)?;
        let p = g.softmax(z);
        Ok(g.column(p, 0)?)
    }
}

impl WeightingNet {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = CONV_CHANNELS;
        let blocks = [
            ConvBnRelu::new(&mut store, "weighting.0", c, c, 3, 1, 1, &mut rng)?,
            ConvBnRelu::new(&mut store, "weighting.1", c, c, 3, 2, 1, &mut rng)?,
            ConvBnRelu::new(&mut store, "weighting.2", c, c, 3, 1, 1, &mut rng)?,
            ConvBnRelu::new(&mut store, "weighting.3", c, c, 3, 2, 1, &mut rng)?,
        ];
        let flat = c * (FEATURE_SIZE / 4) * (FEATURE_SIZE / 4);
        let hidden = Linear::new(&mut store, "weighting.hidden", flat, HIDDEN, &mut rng)?;
        let output = Linear::new(&mut store, "weighting.output", HIDDEN, 2, &mut rng)?;
        Ok(WeightingNet {
            store,
            layers: WeightingLayers { blocks, hidden, output },
        })
    }

    pub fn weight_forward(&self, g: &mut Graph, ego: Var, received: Var, mode: Mode) -> Result<Var> {
        self.layers.weight_forward(g, &self.store, ego, received, mode)
    }

    /// Eval-mode weights for stacked maps.
    pub fn weights(&self, ego: &Tensor, received: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let e = g.input(ego.clone());
        let r = g.input(received.clone());
        let w = self.weight_forward(&mut g, e, r, Mode::Eval)?;
        Ok(g.value(w).data().to_vec())
    }

    /// Eval-mode weight of one received map `[C, H, W]`.
    pub fn weight(&self, ego: &Tensor, received: &Tensor) -> Result<f64> {
        let e = with_batch_axis(ego)?;
        let r = with_batch_axis(received)?;
        Ok(self.weights(&e, &r)?[0])
    }
}

fn with_batch_axis(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshape(&shape)?)
}

/// `f~ = W f^`.
pub fn apply_weight(w: f64, f: &Tensor) -> Tensor {
    f.scale(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSupervisedParams {
    pub lambda_pos: f64,
    /// Scale of the negative term. At the toy feature scale a value near
    /// 1e-4 leaves `W-` where the positive term puts it.
    pub lambda_neg: f64,
    /// softmax temperature `T` inside the KL terms
    pub temperature: f64,
    pub positive_snr_db: f64,
    pub negative_snr_db: f64,
    pub epochs: usize,
    /// scenes per optimizer step
    pub batch_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for SelfSupervisedParams {
    fn default() -> Self {
        SelfSupervisedParams {
            lambda_pos: 1.0,
            lambda_neg: 1.0,
            temperature: 20.0,
            positive_snr_db: 30.0,
            negative_snr_db: -10.0,
            epochs: 10,
            batch_scenes: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

impl SelfSupervisedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pos >= 0.0 && self.lambda_neg >= 0.0) {
            return Err(CoreError::Config("lambdas must be nonnegative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        if self.batch_scenes == 0 || !(self.lr > 0.0) {
            return Err(CoreError::Config("batch_scenes and lr must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Clean feature and its two channel-distorted copies.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPair {
    pub clean: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Augmentation link: flat Rician, K = 1, unit distance, perfect CSI.
pub fn augmentation_link(snr_db: f64) -> Link {
    Link::Flat(FlatChannelConfig::rician(1.0, snr_db))
}

pub fn make_augmentations<R: Rng + ?Sized>(
    f: &Tensor,
    params: &SelfSupervisedParams,
    rng: &mut R,
) -> Result<AugmentationPair> {
    let positive = transmit(0, f, &augmentation_link(params.positive_snr_db), rng)?.feature;
    let negative = transmit(0, f, &augmentation_link(params.negative_snr_db), rng)?.feature;
    Ok(AugmentationPair {
        clean: f.clone(),
        positive,
        negative,
    })
}

/// One self-supervised batch: row `i` is a shared feature of some scene,
/// `ego[i]` the ego feature of that scene and `scene_weight[i]` the factor
/// `1 / (K_s * scenes)` that averages the loss over collaborators and scenes.
#[derive(Clone, Debug)]
pub struct SelfSupervisedBatch {
    pub ego: Tensor,
    pub clean: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub scene_weight: Vec<f64>,
}

impl SelfSupervisedBatch {
    /// Builds a batch from per-scene `(ego, pairs)` entries.
    pub fn from_scenes(scenes: &[(Tensor, Vec<AugmentationPair>)]) -> Result<Self> {
        let count = scenes.len().max(1) as f64;
        let mut ego = Vec::new();
        let mut clean = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut scene_weight = Vec::new();
        for (e, pairs) in scenes {
            for p in pairs {
                for t in [&p.clean, &p.positive, &p.negative] {
                    if t.shape() != e.shape() {
                        return Err(CoreError::Shape(e.shape().to_vec(), t.shape().to_vec()));
                    }
                }
                ego.push(e);
                clean.push(&p.clean);
                pos.push(&p.positive);
                neg.push(&p.negative);
                scene_weight.push(1.0 / (pairs.len() as f64 * count));
            }
        }
        if ego.is_empty() {
            return Err(CoreError::EmptyFrame);
        }
        Ok(SelfSupervisedBatch {
            ego: Tensor::stack(&ego)?,
            clean: Tensor::stack(&clean)?,
            positive: Tensor::stack(&pos)?,
            negative: Tensor::stack(&neg)?,
            scene_weight,
        })
    }

    pub fn len(&self) -> usize {
        self.scene_weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_weight.is_empty()
    }
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(&shape, data)?)
}

/// Recorded loss plus the positive and negative weights `[B]` each.
pub struct SelfSupervisedOutput {
    pub loss: Var,
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
}

/// Records the self-supervised loss. Positive and negative copies go through
/// the network as one batch so batch normalization sees both.
pub fn self_supervised_loss(
    g: &mut Graph,
    net: &WeightingLayers,
    store: &ParamStore,
    batch: &SelfSupervisedBatch,
    params: &SelfSupervisedParams,
    mode: Mode,
) -> Result<SelfSupervisedOutput> {
    let b = batch.len();
    let ego2 = concat_rows(&batch.ego, &batch.ego)?;
    let recv = concat_rows(&batch.positive, &batch.negative)?;
    let e = g.input(ego2);
    let r = g.input(recv);
    let w = net.weight_forward(g, store, e, r, mode)?;
    let rf = g.flatten(r)?;
    let weighted = g.scale_rows(w, rf)?;
    let tempered = g.scale(weighted, 1.0 / params.temperature);
    let p = g.softmax(tempered);

    let clean_flat = batch.clean.reshape(&[b, batch.clean.numel() / b.max(1)])?;
    let mut q = Vec::with_capacity(2 * clean_flat.numel());
    for i in 0..b {
        let row: Vec<f64> = clean_flat.row(i).iter().map(|v| v / params.temperature).collect();
        q.extend(softmax(&row));
    }
    q.extend_from_within(..);
    let q = Tensor::new(g.shape(p), q)?;
    let kl = g.kl_div_rows(p, &q)?;

    let t2 = params.temperature * params.temperature;
    let mut factors = Vec::with_capacity(2 * b);
    factors.extend(batch.scene_weight.iter().map(|s| s * params.lambda_pos * t2));
    factors.extend(batch.scene_weight.iter().map(|s| s * params.lambda_neg * t2));
    let f = g.input(Tensor::new(&[2 * b], factors)?);
    let terms = g.scale_rows(f, kl)?;
    let loss = g.sum(terms);
    let wv = g.value(w).data();
    Ok(SelfSupervisedOutput {
        loss,
        w_pos: wv[..b].to_vec(),
        w_neg: wv[b..].to_vec(),
    })
}

/// Per-epoch training summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mean_w_pos: f64,
    pub mean_w_neg: f64,
}

/// Clean eval-mode features of every agent of a scene, `[A, C, H, W]`.
pub fn scene_features(backbone: &PerceptionModel, scene: &Scene) -> Result<Tensor> {
    backbone.encode_eval(&scene.rasters()?)
}

/// Splits `[A, C, H, W]` into the ego map and the shared maps.
pub fn split_agents(features: &Tensor) -> (Tensor, Vec<Tensor>) {
    let s = features.shape();
    let inner: Vec<usize> = s[1..].to_vec();
    let rows: Vec<Tensor> = (0..s[0])
        .map(|i| Tensor::new(&inner, features.row(i).to_vec()).expect("row has the map size"))
        .collect();
    let mut it = rows.into_iter();
    let ego = it.next().expect("at least one agent");
    (ego, it.collect())
}

/// Trains `net` on augmentations of the frozen backbone's shared features.
/// Only weighting parameters are updated; a checksum of the backbone taken
/// before and after training must agree.
pub fn train_weighting(
    net: &mut WeightingNet,
    backbone: &PerceptionModel,
    scenes: &[Scene],
    params: &SelfSupervisedParams,
    seed: u64,
) -> Result<Vec<WeightingEpoch>> {
    params.validate()?;
    if scenes.is_empty() {
        return Err(CoreError::Config("no training scenes".into()));
    }
    let before = backbone.store.checksum();
    let features: Vec<(Tensor, Vec<Tensor>)> = scenes
        .iter()
        .map(|s| scene_features(backbone, s).map(|f| split_agents(&f)))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam = params.adam();
    let mut log = Vec::with_capacity(params.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let lr = adam.step_decay_lr(epoch, params.epochs);
        let step_cfg = AdamConfig { lr, ..adam };
        let (mut loss_sum, mut wp_sum, mut wn_sum, mut steps, mut rows) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(params.batch_scenes) {
            let mut entries = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (ego, shared) = &features[i];
                let pairs = shared
                    .iter()
                    .map(|f| make_augmentations(f, params, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                entries.push((ego.clone(), pairs));
            }
            let batch = SelfSupervisedBatch::from_scenes(&entries)?;
            let mut g = Graph::new();
            let out = self_supervised_loss(&mut g, &net.layers, &net.store, &batch, params, Mode::Train)?;
            g.backward_into(out.loss, &mut net.store)?;
            g.apply_running_updates(&mut net.store);
            net.store.adam_step(&step_cfg);
            loss_sum += g.value(out.loss).data()[0];
            wp_sum += out.w_pos.iter().sum::<f64>();
            wn_sum += out.w_neg.iter().sum::<f64>();
            steps += 1;
            rows += batch.len();
        }
        log.push(WeightingEpoch {
            epoch,
            loss: loss_sum / steps as f64,
            mean_w_pos: wp_sum / rows as f64,
            mean_w_neg: wn_sum / rows as f64,
        });
    }
    net.store.round_to_f32();
    let after = backbone.store.checksum();
    if before != after {
        return Err(CoreError::BackboneModified { before, after });
    }
    Ok(log)
}
