//! Four-stage hybrid backbone. Stages 1-2 are convolutional blocks (the
//! first `ssaa_blocks` of stage 1 blend features with their horizontal
//! mirror), stages 3-4 are multi-head self-attention blocks. A linear head
//! maps the pooled stage-4 embedding to a scalar fidelity score.

mod blocks;
mod config;
mod io;
mod network;

pub use blocks::{scaled_dot_product_attention, ssaa, AttentionVars};
pub use config::ModelConfig;
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use network::{ForwardOutput, Mode, SsaaFormer};
