//! Minimal tensor and neural-network kernel with reverse-mode gradients.
//!
//! The crate covers exactly what the cooperative-perception models need:
//! convolution, batch normalization, rectifiers, dense layers, softmax,
//! KL divergence and Adam, plus extension points ([`CustomOp`]) for the
//! fusion and detection-loss operators defined downstream.

pub mod checkpoint;
pub mod error;
pub mod functional;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use functional::LossParams;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{BatchNorm, Conv2d, ConvBnRelu, Linear, Mode};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
