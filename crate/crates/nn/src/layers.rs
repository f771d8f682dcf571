//! Parameterized layers built on [`Graph`] ops.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Ok(Conv2d {
            weight: store.add(&format!("{name}.weight"), w)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]))?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?,
        })
    }

    /// In train mode the running statistics update is queued on the graph;
    /// apply it with [`Graph::apply_running_updates`].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                g.running_updates.push(crate::graph::RunningUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var_unbiased: var,
                    momentum: BN_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                BN_EPS,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::randn(&[outputs, inputs], (2.0 / inputs as f64).sqrt(), rng);
        Ok(Linear {
            weight: store.add(&format!("{name}.weight"), w)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Convolution, batch normalization and rectifier.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}
