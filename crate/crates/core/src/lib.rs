//! Audio-driven portrait animation on a latent diffusion backbone.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape and the HTNS file format
//! * [`nn`]: named parameters, linear / 1×1 / 3×3 layers and checkpoints
//! * [`attention`]: cross- and self-attention with `W_Q`, `W_K`, `W_V` projections
//! * [`maskgen`]: lip / expression / pose masks from facial landmarks
//! * [`hadvs`]: hierarchical audio-visual cross attention and its fusion modes
//! * [`encoders`]: toy VAE, face identity encoder and audio projection
//! * [`denoiser`]: the UNet noise predictor with reference, face, audio and temporal paths
//! * [`diffusion`]: noise schedule, training objective, guidance and DDIM sampling
//! * [`pipeline`]: synthetic data, two-stage training, incremental animation, ablations and profiling
//! * [`metrics`]: Fréchet distance and a correlation-based lip-sync proxy

pub mod attention;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod hadvs;
pub mod image;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
