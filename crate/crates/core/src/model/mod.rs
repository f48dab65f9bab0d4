//! Encoder/decoder networks with optional channel-conditioned attention.

mod condition;
mod config;
mod metrics;
mod network;

pub use condition::{ConditionRanges, ConditionSpec};
pub use config::{derive_channel_count, ChannelCount, ModelConfig};
pub use metrics::{mse, psnr, PSNR_CAP_DB};
pub use network::{
    apply_channel, attention_forward, attention_param_count, power_normalize, Architecture, AttentionSwitch,
    Network, SymbolVector,
};
