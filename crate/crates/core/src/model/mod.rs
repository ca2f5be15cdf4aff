//! The encoder: configuration, parameter registry, positional tables, blocks.

pub mod config;
pub mod encoder;
pub mod layers;
pub mod params;
pub mod rope;

pub use config::{ffn_hidden_size, Activation, ModelConfig, NormKind, NormPlacement, Positional, RopeScaling};
pub use encoder::{Bound, Encoder, Inputs};
pub use params::{param_count, param_layout, EncoderParams, ParamKind};
pub use rope::{rope_apply, rope_tables};
