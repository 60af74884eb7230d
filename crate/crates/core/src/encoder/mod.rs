//! Small BERT/XLNet-style encoder with gate attachment points.

pub mod checkpoint;
mod config;
mod layer;
mod model;

pub use config::{ClsPosition, EncoderConfig, Injection};
pub use layer::{encoder_layer, multi_head_attention, LayerSettings, LayerVars};
pub use model::{count_parameters, EncoderModel, ForwardOutput, ModelInput, ParameterCount};
