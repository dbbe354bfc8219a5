//! Pre-norm transformer blocks, the routed DGE block and a toy classifier.

mod config;
mod dge;
mod layers;
mod model;

pub use config::{EncoderConfig, ModelConfig};
pub use dge::{dge_block, DgeLayerOutput, FeatureMap, Selection};
pub use layers::{attention, linear, vanilla_encoder, AttentionParams, BlockParams, Linear, Norm};
pub use model::{BoundModel, ForwardOutput, LayerInputHook, Routing, VitModel};
