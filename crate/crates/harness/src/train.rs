//! Supervised training of the perception backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use v2v_core::perception::fusion::Group;
use v2v_core::perception::{
    assign_targets, detection_loss, fuse_attentive, Anchor, AssignThresholds, PerceptionModel, Scene, Targets,
};
use v2v_core::transport::{transmit, Link};
use v2v_nn::{AdamConfig, Graph, LossParams, Mode, Tensor};

use crate::error::Result;

pub const HEAD_GRID: usize = v2v_core::perception::model::FEATURE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct SupervisedSetup<'a> {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub adam: AdamConfig,
    pub loss: LossParams,
    pub anchors: &'a [Anchor],
    /// link for the shared features during training; `Link::Ideal` for
    /// scheme 1
    pub link: Link,
}

/// Stacked rasters `[sum A, 1, 64, 64]` and per-scene agent counts.
pub fn stack_rasters(scenes: &[&Scene]) -> Result<(Tensor, Vec<usize>)> {
    let mut views = Vec::new();
    let mut counts = Vec::with_capacity(scenes.len());
    for s in scenes {
        for a in 0..s.agents.len() {
            views.push(s.raster(a)?);
        }
        counts.push(s.agents.len());
    }
    let refs: Vec<&Tensor> = views.iter().collect();
    Ok((Tensor::stack(&refs)?, counts))
}

/// Channel error `f^ - f` for every shared (non-ego) map, zero for ego maps.
/// It enters the graph as a constant, so gradients pass straight through
/// the channel to the collaborator encoders.
pub fn channel_residual(
    features: &Tensor,
    counts: &[usize],
    link: &Link,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let s = features.shape();
    let inner = s[1..].to_vec();
    let mut residual = vec![0.0; features.numel()];
    let map = features.row_len();
    let mut row = 0;
    for &n in counts {
        for j in 0..n {
            if j > 0 {
                let f = Tensor::new(&inner, features.row(row).to_vec())?;
                let rx = transmit(j, &f, link, rng)?.feature;
                for (k, (a, b)) in rx.data().iter().zip(f.data()).enumerate() {
                    residual[row * map + k] = a - b;
                }
            }
            row += 1;
        }
    }
    Ok(Tensor::new(s, residual)?)
}

/// Trains `model` end to end on `scenes`; returns one log row per epoch.
pub fn train_supervised(
    model: &mut PerceptionModel,
    scenes: &[Scene],
    setup: &SupervisedSetup,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    setup.link.validate()?;
    let targets: Vec<Targets> = scenes
        .iter()
        .map(|s| assign_targets(&s.objects, setup.anchors, AssignThresholds::default()))
        .collect::<std::result::Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = Vec::with_capacity(setup.epochs);
    for epoch in 0..setup.epochs {
        order.shuffle(&mut rng);
        let lr = setup.adam.step_decay_lr(epoch, setup.epochs);
        let adam = AdamConfig { lr, ..setup.adam };
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(setup.batch_scenes) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let batch_targets: Vec<Targets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let (rasters, counts) = stack_rasters(&batch)?;
            let mut g = Graph::new();
            let x = g.input(rasters);
            let mut f = model.encode(&mut g, x, Mode::Train)?;
            if setup.link != Link::Ideal {
                let r = channel_residual(g.value(f), &counts, &setup.link, &mut rng)?;
                f = g.add_const(f, &r)?;
            }
            let fused = fuse_attentive(&mut g, f, &Group::consecutive(&counts))?;
            let head = model.head(&mut g, fused)?;
            let loss = detection_loss(&mut g, head, &batch_targets, &setup.loss)?;
            g.backward_into(loss, &mut model.store)?;
            g.apply_running_updates(&mut model.store);
            model.store.adam_step(&adam);
            total += g.value(loss).data()[0];
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: total / steps.max(1) as f64,
            lr,
        });
    }
    model.store.round_to_f32();
    Ok(log)
}
