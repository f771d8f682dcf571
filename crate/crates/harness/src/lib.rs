//! Experiment orchestration: training schemes, evaluation, sweeps and
//! metrics output.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod pipeline;
pub mod seeds;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
