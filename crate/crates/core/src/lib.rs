//! Multi-face manipulation detection and localization.
//!
//! A small pyramid CNN feeds a per-scale mixture of noise extractors
//! ([`mone`]) whose residual cues enhance the features consumed by the
//! forgery-aware unified predictor ([`fup`]). Two learnable tokens (real,
//! fake) attend to the features through masked cross-attention ([`fat`]) and
//! produce both the image-level logits and the pixel-level mask.
//!
//! Everything runs on a tape-based reverse-mode autodiff engine over `f64`
//! tensors ([`autograd`]).

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fat;
pub mod fup;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod mone;
pub mod nn;
pub mod noise_experts;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
