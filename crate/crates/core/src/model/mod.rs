//! Convolutional encoder, projection/classification heads, freeze masks and
//! checkpoints.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{CheckpointHeader, ParamEntry};
pub use config::{EncoderConfig, FreezeMask, HeadConfig, HeadKind};
pub use params::{
    build_encoder, flatten_block, pool_block, Activations, Encoded, HeadParams, Mode, ModelParams,
};
