//! Channel simulation, feature transport, a toy cooperative bird's-eye-view
//! detection task, and the CAV-level adaptive weighting network.

pub mod channel;
pub mod error;
pub mod perception;
pub mod transport;
pub mod weighting;

pub use error::{CoreError, Result};
