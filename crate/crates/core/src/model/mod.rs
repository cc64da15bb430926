//! Detector architecture: patch backbone, transformer encoder and the two
//! parallel decoders with their prediction heads.

mod attention;
mod bbox;
pub mod checkpoint;
mod config;
mod net;

pub use attention::{attention_image, export_attention, import_attention, AttentionExport, AttentionGrid, AttentionRecord, Predictor};
pub use bbox::BBox;
pub use config::ModelConfig;
pub use net::{
    DecoderOutput, ForwardOutput, InstanceOutputs, InstanceVars, LayerOutputs, PrNet, RelationOutputs,
    RelationVars, VisualMemory, BACKBONE_PREFIX,
};
