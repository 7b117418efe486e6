//! The PainViT architecture, its accounting, and checkpoint I/O.

pub mod accounting;
pub mod checkpoint;
mod config;
mod layers;
mod painvit;
mod params;

pub use config::{PainViTConfig, StageConfig};
pub use layers::{
    AttentionCapture, AttentionHead, CascadedAttention, Dense, DwConv, Norm, ParamGrads, Pass, PassOptions,
    PatchEmbed, Subsample, TokenMixer,
};
pub use painvit::{Block, Outputs, PainViT};
pub use params::{NormId, Param, ParamId, ParamStore, RunningStats};
