//! CNN backbones with named stage features, and their checkpoint format.

mod backbone;
pub mod checkpoint;
mod config;
pub mod layers;

pub use backbone::{ForwardOutput, Mode, ModelInstance, StageFeatures};
pub use config::{BackboneConfig, BlockKind, StageSpec};
