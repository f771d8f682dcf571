//! Encoder and single-shot detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use v2v_nn::{Conv2d, ConvBnRelu, Graph, Mode, ParamStore, Tensor, Var};

use super::loss::HEAD_CHANNELS;
use crate::error::{CoreError, Result};

pub const RASTER_SIZE: usize = 64;
pub const FEATURE_CHANNELS: usize = 8;
pub const FEATURE_SIZE: usize = 16;
const HEAD_HIDDEN: usize = 32;
/// Initial objectness probability, so early focal losses are dominated by
/// positives rather than the many easy negatives.
const OBJECTNESS_PRIOR: f64 = 0.01;

/// Raster encoder `[N, 1, 64, 64] -> [N, 8, 16, 16]` followed by a detection
/// head `[S, 8, 16, 16] -> [S, 8, 16, 16]` (objectness logit, 7 residuals).
#[derive(Debug)]
pub struct PerceptionModel {
    pub store: ParamStore,
    pub layers: PerceptionLayers,
}

/// Layer handles of a [`PerceptionModel`]; the values live in a store passed
/// to every call.
#[derive(Clone, Debug)]
pub struct PerceptionLayers {
    encoder: [ConvBnRelu; 3],
    head_hidden: Conv2d,
    head_out: Conv2d,
}

impl PerceptionLayers {
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, rasters: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(rasters);
        if s.len() != 4 || s[1] != 1 || s[2] != RASTER_SIZE || s[3] != RASTER_SIZE {
            return Err(CoreError::Shape(s.to_vec(), vec![0, 1, RASTER_SIZE, RASTER_SIZE]));
        }
        let mut x = rasters;
        for block in &self.encoder {
            x = block.forward(g, store, x, mode)?;
        }
        Ok(x)
    }

    pub fn head(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let s = g.shape(fused);
        if s.len() != 4 || s[1] != FEATURE_CHANNELS || s[2] != FEATURE_SIZE || s[3] != FEATURE_SIZE {
            return Err(CoreError::Shape(s.to_vec(), vec![0, FEATURE_CHANNELS, FEATURE_SIZE, FEATURE_SIZE]));
        }
        let h = self.head_hidden.forward(g, store, fused)?;
        let h = g.relu(h);
        Ok(self.head_out.forward(g, store, h)?)
    }
}

impl PerceptionModel {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = [
            ConvBnRelu::new(&mut store, "encoder.0", 1, 16, 3, 2, 1, &mut rng)?,
            ConvBnRelu::new(&mut store, "encoder.1", 16, 16, 3, 2, 1, &mut rng)?,
            ConvBnRelu::new(&mut store, "encoder.2", 16, FEATURE_CHANNELS, 3, 1, 1, &mut rng)?,
        ];
        let head_hidden = Conv2d::new(&mut store, "head.hidden", FEATURE_CHANNELS, HEAD_HIDDEN, 3, 1, 1, &mut rng)?;
        let head_out = Conv2d::new(&mut store, "head.out", HEAD_HIDDEN, HEAD_CHANNELS, 1, 1, 0, &mut rng)?;
        let bias = store.value_mut(head_out.bias);
        bias.data_mut()[0] = -((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln();
        Ok(PerceptionModel {
            store,
            layers: PerceptionLayers {
                encoder,
                head_hidden,
                head_out,
            },
        })
    }

    pub fn encode(&self, g: &mut Graph, rasters: Var, mode: Mode) -> Result<Var> {
        self.layers.encode(g, &self.store, rasters, mode)
    }

    pub fn head(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        self.layers.head(g, &self.store, fused)
    }

    /// Eval-mode features of stacked rasters `[N, 1, 64, 64]`.
    pub fn encode_eval(&self, rasters: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.input(rasters.clone());
        let f = self.encode(&mut g, x, Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Head output for fused maps `[S, 8, 16, 16]`.
    pub fn head_eval(&self, fused: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.input(fused.clone());
        let h = self.head(&mut g, x)?;
        Ok(g.value(h).clone())
    }
}
