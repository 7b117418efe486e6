//! Twin hierarchical vision transformers for multimodal pain assessment.
//!
//! The pipeline turns facial video frames and fNIRS channels into embeddings
//! with one [`PainViT`](model::PainViT), draws those embeddings as waveform
//! diagrams, and classifies the diagram with a second, architecturally
//! identical model.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: `f64` tensors, an op graph with reverse-mode gradients,
//!   finite-difference checking.
//! - [`model`]: patch embedding, token mixer, cascaded attention, stage
//!   subsampling, parameter/compute accounting, checkpoints.
//! - [`waveform`]: 224×224 rasterisation of 1-D series.
//! - [`fusion`]: embedding extraction and the addition, concatenation and
//!   single-diagram fusion paths.
//! - [`augment`]: MaskOut, uniform noise, simplified policy stack.
//! - [`training`]: losses, AdamW with warmup/cosine/cooldown schedule,
//!   training loop, macro metrics.
//! - [`dataset`]: on-disk layout, ingestion and synthetic data generation.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod training;
pub mod waveform;

pub use error::{Error, Result};
pub use numerics::{Graph, Mode, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/waveform.md")]
    mod waveform {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/augment.md")]
    mod augment {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
