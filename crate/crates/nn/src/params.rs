//! Named parameter storage, gradient accumulators and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    trainable: bool,
}

/// Parameters plus per-parameter gradient and Adam moment buffers.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so checkpoints and checksums cover them, but the optimizer skips
/// them.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl Clone for ParamStore {
    /// Clones get a fresh store identity so their handles do not alias.
    fn clone(&self) -> Self {
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.index.insert(e.name.clone(), store.entries.len());
            store.entries.push(e.clone());
        }
        store.step = self.step;
        store
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam hyper-parameters. Weight decay is applied as an L2 term added to the
/// gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    /// Learning rate for `epoch` (0-based) under a step schedule that halves
    /// the base rate after each completed third of `total_epochs`.
    pub fn step_decay_lr(&self, epoch: usize, total_epochs: usize) -> f64 {
        let third = total_epochs.div_ceil(3).max(1);
        let drops = (epoch / third).min(2) as i32;
        self.lr * 0.5f64.powi(drops)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        let idx = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), idx);
        Ok(ParamId {
            store: self.id,
            index: idx,
        })
    }

    /// Registers a trainable parameter.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Registers a buffer that is saved and checksummed but never optimized.
    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&index| ParamId {
                store: self.id,
                index,
            })
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn store_id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(move |index| ParamId {
            store: self.id,
            index,
        })
    }

    fn entry(&self, id: ParamId) -> &Entry {
        assert_eq!(id.store, self.id, "parameter handle from another store");
        &self.entries[id.index]
    }

    fn entry_mut(&mut self, id: ParamId) -> &mut Entry {
        assert_eq!(id.store, self.id, "parameter handle from another store");
        &mut self.entries[id.index]
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entry(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entry_mut(id).value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entry(id).grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entry(id).trainable
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.entry_mut(id).grad.add_assign(grad);
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam update with bias correction over every trainable entry,
    /// followed by clearing all gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let value = e.value.data_mut();
            let grad = e.grad.data();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i] + cfg.weight_decay * value[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
    }

    /// Rounds every stored value to the nearest `f32`, so that the in-memory
    /// model equals what a checkpoint round trip produces.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// FNV-1a hash over names, shapes and the exact bit patterns of all
    /// values, buffers included.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for &d in e.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub(crate) fn entries_for_checkpoint(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, e.trainable))
    }
}
