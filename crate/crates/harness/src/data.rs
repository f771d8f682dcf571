//! Scene splits derived from the run seed.

use v2v_core::perception::{generate_scene, Scene, SceneConfig};

use crate::error::Result;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Scene `index` of `split`; its seed is recorded inside the scene.
pub fn scene(cfg: &SceneConfig, run_seed: u64, split: Split, index: usize) -> Result<Scene> {
    Ok(generate_scene(cfg, seeds::derive(run_seed, split.tag(), index as u64))?)
}

pub fn scenes(cfg: &SceneConfig, run_seed: u64, split: Split, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| scene(cfg, run_seed, split, i)).collect()
}
