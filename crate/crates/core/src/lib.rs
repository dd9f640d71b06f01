//! Group diffusion at desk scale.
//!
//! A small diffusion transformer whose attention can span a whole group of
//! related images, trained and sampled on a procedural toy dataset, plus the
//! tooling to measure how much attention flows between group members.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, AdamW, checkpoints
//! - [`data`]: procedural toy images and the handcrafted feature encoder
//! - [`grouping`]: similarity index, query function, group assembly
//! - [`denoiser`]: the patch transformer with group attention
//! - [`diffusion`]: noise schedule, group timesteps, group loss
//! - [`sampler`]: ancestral sampling with guidance in three modes
//! - [`metrics`]: cross-sample attention statistics and probes
//! - [`eval`]: Fréchet distance proxy, linear probe, guidance sweep
//! - [`train`], [`config`], [`experiment`]: orchestration
//! - [`plot`]: SVG line plots

pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grouping;
pub mod metrics;
pub mod par;
pub mod plot;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
