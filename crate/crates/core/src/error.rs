use thiserror::Error;
use v2v_nn::NnError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty frame")]
    EmptyFrame,
    #[error("frame size mismatch: {0}")]
    FrameSize(String),
    #[error("zero pilot symbol at subcarrier {0}")]
    ZeroPilot(usize),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("frozen backbone changed during weighting training (checksum {before:#x} -> {after:#x})")]
    BackboneModified { before: u64, after: u64 },
    #[error("scene fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
