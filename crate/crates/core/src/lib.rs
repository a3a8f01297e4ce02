//! Long-video latent denoising with fused global and local clip paths.

pub mod checks;
pub mod clip_maps;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod fusion;
pub mod io;
pub mod latent;
pub mod noise_reinit;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod vmcr;

pub use error::{Error, Result};
pub use latent::{LatentShape, LatentVideo};
