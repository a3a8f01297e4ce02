//! The denoiser contract `eps = Phi(z_t, t, y)` and reference
//! implementations that make the engine checkable without a trained model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip_maps::PathKind;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::schedule::{DenoisePrediction, DenoiseSchedule};

pub mod attention;
pub mod bridge;

pub use attention::{
    blend_anchor_kv, capture_anchor, toy_attention_forward, AnchorKV, AnchorSlot, AttnMatrix, ToyAttentionDenoiser,
    ToyAttentionParams,
};

/// One clip to denoise.
#[derive(Debug, Clone)]
pub struct DenoiseRequest {
    pub clip: LatentVideo,
    pub t: usize,
    /// Opaque conditioning payload (prompt text or an embedding reference).
    pub conditioning: Arc<str>,
    pub clip_id: usize,
    pub path: PathKind,
    pub anchor_kv: Option<Arc<AnchorKV>>,
}

impl DenoiseRequest {
    pub fn new(clip: LatentVideo, t: usize) -> Self {
        DenoiseRequest { clip, t, conditioning: Arc::from(""), clip_id: 0, path: PathKind::Local, anchor_kv: None }
    }

    pub fn with_clip_id(mut self, clip_id: usize, path: PathKind) -> Self {
        self.clip_id = clip_id;
        self.path = path;
        self
    }

    pub fn with_conditioning(mut self, conditioning: Arc<str>) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn with_anchor(mut self, anchor: Option<Arc<AnchorKV>>) -> Self {
        self.anchor_kv = anchor;
        self
    }

    /// A denoiser error carrying this request's clip id and timestep.
    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Denoiser { clip_id: self.clip_id, t: self.t, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserCapabilities {
    /// `denoise` may be called from several threads at once.
    pub concurrent_safe: bool,
    /// Identical requests give bit-identical predictions.
    pub deterministic: bool,
    /// Supports [`Denoiser::attention_kv`] for anchor capture.
    pub exposes_attention: bool,
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> DenoiserCapabilities;

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction>;

    /// Per-frame attention keys and values the model computes for `req`.
    fn attention_kv(&self, req: &DenoiseRequest) -> Result<Option<(AttnMatrix, AttnMatrix)>> {
        let _ = req;
        Ok(None)
    }
}

/// Checks a prediction against the request it answers.
pub fn validate_prediction(req: &DenoiseRequest, pred: &DenoisePrediction) -> Result<()> {
    if pred.eps.shape() != req.clip.shape() {
        return Err(req.error(format!(
            "prediction shape {:?} does not match clip {:?}",
            pred.eps.shape().as_array(),
            req.clip.shape().as_array()
        )));
    }
    pred.eps.ensure_finite("noise prediction").map_err(|e| req.error(e.to_string()))
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn name(&self) -> &str {
        "zero"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: false }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        Ok(DenoisePrediction::new(LatentVideo::zeros(req.clip.shape()), req.t))
    }
}

/// Exact posterior-mean noise predictor for data `x0 ~ N(mu, sigma^2 I)`:
/// `eps(z, t) = sqrt(1 - ab) (z - sqrt(ab) mu) / (1 - ab (1 - sigma^2))`.
#[derive(Debug, Clone)]
pub struct LinearGaussianDenoiser {
    pub mu: f64,
    pub sigma: f64,
    schedule: Arc<DenoiseSchedule>,
}

impl LinearGaussianDenoiser {
    pub fn new(mu: f64, sigma: f64, schedule: Arc<DenoiseSchedule>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::Parameter(format!("need finite mu and sigma > 0, got mu={mu}, sigma={sigma}")));
        }
        Ok(LinearGaussianDenoiser { mu, sigma, schedule })
    }

    /// `(gain, offset)` with `eps = gain * z - offset`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.schedule.alpha_bar(t)?;
        let denom = 1.0 - ab * (1.0 - self.sigma * self.sigma);
        let gain = (1.0 - ab).sqrt() / denom;
        Ok((gain, gain * ab.sqrt() * self.mu))
    }
}

impl Denoiser for LinearGaussianDenoiser {
    fn name(&self) -> &str {
        "linear_gaussian"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: false }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        let (gain, offset) = self.coefficients(req.t).map_err(|e| req.error(e.to_string()))?;
        let (gain, offset) = (gain as f32, offset as f32);
        let eps = req.clip.map(|z| gain * z - offset).map_err(|e| req.error(e.to_string()))?;
        Ok(DenoisePrediction::new(eps, req.t))
    }
}

/// Zero prediction plus Gaussian perturbation seeded by
/// `(seed, t, path, clip_id)`.
#[derive(Debug, Clone, Copy)]
pub struct SeededNoisyDenoiser {
    pub seed: u64,
    pub scale: f32,
}

impl Denoiser for SeededNoisyDenoiser {
    fn name(&self) -> &str {
        "seeded_noisy"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: false }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        let path_bit = match req.path {
            PathKind::Global => 0u64,
            PathKind::Local => 1u64,
        };
        let index = ((req.t as u64) << 24) ^ (path_bit << 23) ^ req.clip_id as u64;
        let noise = standard_normal(req.clip.shape(), &mut stream_rng(self.seed, Stream::Denoiser, index));
        let eps = noise.map(|v| v * self.scale).map_err(|e| req.error(e.to_string()))?;
        Ok(DenoisePrediction::new(eps, req.t))
    }
}
