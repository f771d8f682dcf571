//! Toy bird's-eye-view cooperative detection: scenes and rasters, a small
//! convolutional encoder, attentive fusion, a single-shot detection head,
//! the supervised detection loss and average precision.

pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod scene;

pub use eval::{average_precision, decode_detections, DecodeConfig, Detection};
pub use fusion::{fuse_attentive, fuse_maps, Group};
pub use geometry::{box_residuals, decode_residuals, iou_bev, Anchor, Box3};
pub use loss::{assign_targets, detection_loss, detection_loss_value, AssignThresholds, Label, Targets};
pub use model::{PerceptionLayers, PerceptionModel};
pub use scene::{generate_scene, read_scenes, write_scenes, Scene, SceneConfig};
