//! The three training schemes and their on-disk artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! scheme1/model.ckpt   scheme1/train_log.csv
//! scheme2/model.ckpt   scheme2/train_log.csv
//! scheme3/weighting.ckpt   scheme3/train_log.csv
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use v2v_core::perception::{Anchor, PerceptionModel, Scene};
use v2v_core::transport::Link;
use v2v_core::weighting::{train_weighting, WeightingEpoch, WeightingNet};
use v2v_nn::checkpoint;

use crate::config::RunConfig;
use crate::data::{scenes, Split};
use crate::error::{HarnessError, Result};
use crate::seeds;
use crate::train::{train_supervised, EpochLog, SupervisedSetup, HEAD_GRID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// ideal channel during training
    Ideal,
    /// flat Rician link in the training loop
    Distorted,
    /// frozen scheme-2 backbone plus the weighting network
    Weighted,
}

impl Scheme {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Scheme::Ideal),
            2 => Some(Scheme::Distorted),
            3 => Some(Scheme::Weighted),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Scheme::Ideal => 1,
            Scheme::Distorted => 2,
            Scheme::Weighted => 3,
        }
    }

    pub fn dir(self, output_dir: &Path) -> PathBuf {
        output_dir.join(format!("scheme{}", self.number()))
    }

    /// Checkpoint written by this scheme.
    pub fn checkpoint(self, output_dir: &Path) -> PathBuf {
        let name = if self == Scheme::Weighted { "weighting.ckpt" } else { "model.ckpt" };
        self.dir(output_dir).join(name)
    }

    pub fn train_log(self, output_dir: &Path) -> PathBuf {
        self.dir(output_dir).join("train_log.csv")
    }
}

pub fn anchors(cfg: &RunConfig) -> Vec<Anchor> {
    cfg.scene.anchors(HEAD_GRID)
}

pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    scenes(&cfg.scene, cfg.seed, Split::Train, cfg.dataset.train)
}

pub fn test_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    scenes(&cfg.scene, cfg.seed, Split::Test, cfg.dataset.test)
}

fn init_seed(cfg: &RunConfig, scheme: Scheme) -> u64 {
    seeds::derive(cfg.seed, "init", scheme.number() as u64)
}

fn train_seed(cfg: &RunConfig, scheme: Scheme) -> u64 {
    seeds::derive(cfg.seed, "train", scheme.number() as u64)
}

/// Trains a backbone with scheme 1 or 2. `init` replaces the seeded
/// initialization when given.
pub fn run_supervised(
    cfg: &RunConfig,
    scheme: Scheme,
    train: &[Scene],
    init: Option<PerceptionModel>,
) -> Result<(PerceptionModel, Vec<EpochLog>)> {
    let link = match scheme {
        Scheme::Ideal => Link::Ideal,
        Scheme::Distorted => cfg.training.scheme2_link(),
        Scheme::Weighted => {
            return Err(HarnessError::Config("scheme 3 does not train the backbone".into()));
        }
    };
    let mut model = match init {
        Some(m) => m,
        None => PerceptionModel::new(init_seed(cfg, scheme))?,
    };
    let anchors = anchors(cfg);
    let setup = SupervisedSetup {
        epochs: cfg.training.epochs,
        batch_scenes: cfg.training.batch_scenes,
        adam: cfg.training.adam(),
        loss: cfg.training.loss(),
        anchors: &anchors,
        link,
    };
    let log = train_supervised(&mut model, train, &setup, train_seed(cfg, scheme))?;
    Ok((model, log))
}

pub fn run_scheme1(cfg: &RunConfig, train: &[Scene]) -> Result<(PerceptionModel, Vec<EpochLog>)> {
    run_supervised(cfg, Scheme::Ideal, train, None)
}

pub fn run_scheme2(cfg: &RunConfig, train: &[Scene]) -> Result<(PerceptionModel, Vec<EpochLog>)> {
    run_supervised(cfg, Scheme::Distorted, train, None)
}

/// Trains the weighting network on top of a frozen scheme-2 backbone.
pub fn run_scheme3(
    cfg: &RunConfig,
    backbone: &PerceptionModel,
    train: &[Scene],
) -> Result<(WeightingNet, Vec<WeightingEpoch>)> {
    let mut net = WeightingNet::new(init_seed(cfg, Scheme::Weighted))?;
    let log = train_weighting(&mut net, backbone, train, &cfg.weighting, train_seed(cfg, Scheme::Weighted))?;
    Ok((net, log))
}

fn missing(path: &Path, what: &str) -> HarnessError {
    HarnessError::MissingArtifact(format!("{what} checkpoint {} not found", path.display()))
}

pub fn load_backbone(path: &Path) -> Result<PerceptionModel> {
    if !path.is_file() {
        return Err(missing(path, "backbone"));
    }
    let mut model = PerceptionModel::new(0)?;
    checkpoint::load_file(&mut model.store, path)?;
    Ok(model)
}

pub fn load_weighting(path: &Path) -> Result<WeightingNet> {
    if !path.is_file() {
        return Err(missing(path, "weighting"));
    }
    let mut net = WeightingNet::new(0)?;
    checkpoint::load_file(&mut net.store, path)?;
    Ok(net)
}

fn write_log<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_backbone(output_dir: &Path, scheme: Scheme, model: &PerceptionModel, log: &[EpochLog]) -> Result<()> {
    std::fs::create_dir_all(scheme.dir(output_dir))?;
    checkpoint::save_file(&model.store, scheme.checkpoint(output_dir))?;
    write_log(&scheme.train_log(output_dir), &["epoch", "loss", "lr"], log)
}

#[derive(Serialize)]
struct WeightingLogRow {
    epoch: usize,
    loss: f64,
    #[serde(rename = "mean_W_pos")]
    mean_w_pos: f64,
    #[serde(rename = "mean_W_neg")]
    mean_w_neg: f64,
}

pub fn save_weighting(output_dir: &Path, net: &WeightingNet, log: &[WeightingEpoch]) -> Result<()> {
    let scheme = Scheme::Weighted;
    std::fs::create_dir_all(scheme.dir(output_dir))?;
    checkpoint::save_file(&net.store, scheme.checkpoint(output_dir))?;
    let rows: Vec<WeightingLogRow> = log
        .iter()
        .map(|e| WeightingLogRow {
            epoch: e.epoch,
            loss: e.loss,
            mean_w_pos: e.mean_w_pos,
            mean_w_neg: e.mean_w_neg,
        })
        .collect();
    write_log(&scheme.train_log(output_dir), &["epoch", "loss", "mean_W_pos", "mean_W_neg"], &rows)
}
