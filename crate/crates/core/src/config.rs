//! Run configuration: a TOML document with one table per subsystem.
//!
//! Every key is optional. Omitted hyperparameters take the published
//! defaults; omitted structural values (`dilation`, `stride`,
//! `shuffle_window`, `max_padded_len`) are derived from the video shape by
//! [`PipelineConfig::resolve`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip_maps::{ShiftMode, WeightKind};
use crate::error::{Error, Result};
use crate::fusion::AnnealParams;
use crate::latent::LatentShape;
use crate::noise_reinit::FilterKind;
use crate::vmcr::{PhaseMode, VmcrParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub frames: usize,
    pub clip_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { frames: 24, clip_len: 8, channels: 4, height: 8, width: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Number of sampling steps `T`.
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 50, train_steps: 1000, beta_start: 0.00085, beta_end: 0.012 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlcdConfig {
    pub enable_global: bool,
    pub enable_local: bool,
    /// Global dilation `d`; defaults to `ceil(K / L)`.
    pub dilation: Option<usize>,
    /// Local window stride; defaults to `max(L / 2, 1)`.
    pub stride: Option<usize>,
    /// Longest allowed padded global sequence; defaults to `2 K`.
    pub max_padded_len: Option<usize>,
    pub gamma0: f64,
    pub beta: f64,
    /// Fixed blend coefficient replacing the annealed one.
    pub gamma_override: Option<f64>,
    pub weights: WeightKind,
    pub shift_mode: ShiftMode,
}

impl Default for GlcdConfig {
    fn default() -> Self {
        let anneal = AnnealParams::default();
        GlcdConfig {
            enable_global: true,
            enable_local: true,
            dilation: None,
            stride: None,
            max_padded_len: None,
            gamma0: anneal.gamma0,
            beta: anneal.beta,
            gamma_override: None,
            weights: WeightKind::Triangular,
            shift_mode: ShiftMode::Shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AbamPaths {
    #[default]
    Local,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbamConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub paths: AbamPaths,
}

impl Default for AbamConfig {
    fn default() -> Self {
        AbamConfig { enabled: true, lambda: 0.1, paths: AbamPaths::Local }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub shuffle: bool,
    /// Defaults to the clip length.
    pub shuffle_window: Option<usize>,
    pub frequency_fusion: bool,
    pub filter: FilterKind,
    pub cutoff: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            shuffle: true,
            shuffle_window: None,
            frequency_fusion: true,
            filter: FilterKind::Gaussian,
            cutoff: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmcrConfig {
    pub enabled: bool,
    pub lambda_f: f64,
    pub lambda_mse: f64,
    pub lambda_phase: f64,
    pub omega_motion: f64,
    pub n_iters: usize,
    pub eps_guard: f64,
    pub phase_mode: PhaseMode,
}

impl Default for VmcrConfig {
    fn default() -> Self {
        let p = VmcrParams::default();
        VmcrConfig {
            enabled: true,
            lambda_f: p.lambda_f,
            lambda_mse: p.lambda_mse,
            lambda_phase: p.lambda_phase,
            omega_motion: p.omega_motion,
            n_iters: p.n_iters,
            eps_guard: p.eps_guard,
            phase_mode: p.phase_mode,
        }
    }
}

impl VmcrConfig {
    pub fn params(&self) -> VmcrParams {
        VmcrParams {
            lambda_f: self.lambda_f,
            lambda_mse: self.lambda_mse,
            lambda_phase: self.lambda_phase,
            omega_motion: self.omega_motion,
            n_iters: self.n_iters,
            eps_guard: self.eps_guard,
            phase_mode: self.phase_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Zero,
    LinearGaussian,
    SeededNoisy,
    ToyAttention,
    Bridge,
}

impl DenoiserKind {
    pub fn name(&self) -> &'static str {
        match self {
            DenoiserKind::Zero => "zero",
            DenoiserKind::LinearGaussian => "linear_gaussian",
            DenoiserKind::SeededNoisy => "seeded_noisy",
            DenoiserKind::ToyAttention => "toy_attention",
            DenoiserKind::Bridge => "bridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub name: DenoiserKind,
    /// Opaque conditioning passed with every request.
    pub conditioning: String,
    /// Data mean and standard deviation for `linear_gaussian`.
    pub mu: f64,
    pub sigma: f64,
    /// Perturbation scale for `seeded_noisy`.
    pub noise_scale: f64,
    /// Weight seed for `toy_attention`.
    pub attention_seed: u64,
    /// `host:port` of a bridge server.
    pub address: Option<String>,
    /// Command line of a bridge server speaking over stdio.
    pub command: Option<Vec<String>>,
    pub timeout_secs: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            name: DenoiserKind::Zero,
            conditioning: String::new(),
            mu: 0.0,
            sigma: 1.0,
            noise_scale: 0.1,
            attention_seed: 0,
            address: None,
            command: None,
            timeout_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    #[default]
    Minmax,
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Denoise clips on the rayon pool when the denoiser allows it.
    pub parallel: bool,
    pub export_frames: bool,
    pub normalize: Normalize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 0, parallel: false, export_frames: true, normalize: Normalize::Minmax }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub video: VideoConfig,
    pub schedule: ScheduleConfig,
    pub glcd: GlcdConfig,
    pub abam: AbamConfig,
    pub noise: NoiseConfig,
    pub vmcr: VmcrConfig,
    pub denoiser: DenoiserConfig,
    pub run: RunConfig,
}

/// Structural values after applying shape-derived defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Resolved {
    pub dilation: usize,
    pub stride: usize,
    pub max_padded_len: usize,
    pub shuffle_window: usize,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl PipelineConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        PipelineConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn shape(&self) -> Result<LatentShape> {
        let v = &self.video;
        LatentShape::new(v.frames, v.channels, v.height, v.width)
    }

    pub fn anneal(&self) -> AnnealParams {
        AnnealParams { gamma0: self.glcd.gamma0, beta: self.glcd.beta }
    }

    pub fn resolve(&self) -> Resolved {
        let (k, l) = (self.video.frames, self.video.clip_len.max(1));
        Resolved {
            dilation: self.glcd.dilation.unwrap_or(k.div_ceil(l).max(1)),
            stride: self.glcd.stride.unwrap_or((l / 2).max(1)),
            max_padded_len: self.glcd.max_padded_len.unwrap_or(2 * k),
            shuffle_window: self.noise.shuffle_window.unwrap_or(l),
        }
    }

    /// Checks every value, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(key, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        let v = &self.video;
        positive("video.frames", v.frames)?;
        positive("video.clip_len", v.clip_len)?;
        positive("video.channels", v.channels)?;
        positive("video.height", v.height)?;
        positive("video.width", v.width)?;
        if v.clip_len > v.frames {
            return Err(Error::invalid("video.clip_len", format!("{} exceeds frame count {}", v.clip_len, v.frames)));
        }

        let s = &self.schedule;
        positive("schedule.steps", s.steps)?;
        positive("schedule.train_steps", s.train_steps)?;
        if s.steps > s.train_steps {
            return Err(Error::invalid("schedule.steps", format!("{} exceeds train_steps {}", s.steps, s.train_steps)));
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::invalid("schedule.beta_start", "need 0 < beta_start <= beta_end < 1"));
        }

        let g = &self.glcd;
        if !(g.gamma0 > 0.0 && g.gamma0 <= 1.0) {
            return Err(Error::invalid("glcd.gamma0", format!("must be in (0, 1], got {}", g.gamma0)));
        }
        if !(g.beta >= 0.0 && g.beta.is_finite()) {
            return Err(Error::invalid("glcd.beta", format!("must be finite and >= 0, got {}", g.beta)));
        }
        if let Some(gamma) = g.gamma_override {
            if !(0.0..=1.0).contains(&gamma) {
                return Err(Error::invalid("glcd.gamma_override", format!("must be in [0, 1], got {gamma}")));
            }
        }
        if !g.enable_global && !g.enable_local {
            return Err(Error::invalid(
                "glcd.enable_local",
                "at least one of enable_global and enable_local must be set",
            ));
        }
        let r = self.resolve();
        positive("glcd.dilation", r.dilation)?;
        if r.stride == 0 || r.stride > v.clip_len {
            return Err(Error::invalid("glcd.stride", format!("must be in [1, {}], got {}", v.clip_len, r.stride)));
        }
        if g.enable_global {
            if r.dilation * v.clip_len < v.frames {
                return Err(Error::invalid(
                    "glcd.dilation",
                    format!("dilation {} x clip_len {} does not reach {} frames", r.dilation, v.clip_len, v.frames),
                ));
            }
            if r.dilation * v.clip_len > r.max_padded_len {
                return Err(Error::invalid(
                    "glcd.max_padded_len",
                    format!("padded length {} exceeds {}", r.dilation * v.clip_len, r.max_padded_len),
                ));
            }
        }

        if !(0.0..=1.0).contains(&self.abam.lambda) {
            return Err(Error::invalid("abam.lambda", format!("must be in [0, 1], got {}", self.abam.lambda)));
        }

        positive("noise.shuffle_window", r.shuffle_window)?;
        if !(self.noise.cutoff > 0.0 && self.noise.cutoff <= 0.5) {
            return Err(Error::invalid("noise.cutoff", format!("must be in (0, 0.5], got {}", self.noise.cutoff)));
        }

        let m = &self.vmcr;
        for (key, val) in [
            ("vmcr.lambda_f", m.lambda_f),
            ("vmcr.lambda_mse", m.lambda_mse),
            ("vmcr.lambda_phase", m.lambda_phase),
            ("vmcr.omega_motion", m.omega_motion),
            ("vmcr.eps_guard", m.eps_guard),
        ] {
            if !(val >= 0.0 && val.is_finite()) {
                return Err(Error::invalid(key, format!("must be finite and >= 0, got {val}")));
            }
        }
        if m.enabled && v.frames < 3 {
            return Err(Error::invalid("vmcr.enabled", "motion refinement needs at least 3 frames"));
        }

        let d = &self.denoiser;
        if !(d.sigma > 0.0 && d.sigma.is_finite() && d.mu.is_finite()) {
            return Err(Error::invalid("denoiser.sigma", "need finite mu and sigma > 0"));
        }
        if !(d.noise_scale >= 0.0 && d.noise_scale.is_finite()) {
            return Err(Error::invalid("denoiser.noise_scale", "must be finite and >= 0"));
        }
        if !(d.timeout_secs > 0.0 && d.timeout_secs.is_finite()) {
            return Err(Error::invalid("denoiser.timeout_secs", "must be > 0"));
        }
        if d.name == DenoiserKind::Bridge && d.address.is_none() && d.command.as_ref().is_none_or(|c| c.is_empty()) {
            return Err(Error::invalid("denoiser.address", "bridge needs `address` or a non-empty `command`"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.glcd.gamma0, 0.005);
        assert_eq!(cfg.glcd.beta, 0.0005);
        assert_eq!(cfg.abam.lambda, 0.1);
        assert_eq!(cfg.vmcr.lambda_f, 0.2);
        assert_eq!(cfg.vmcr.lambda_mse, 0.001);
        assert_eq!(cfg.vmcr.lambda_phase, 1.0);
        assert_eq!(cfg.vmcr.omega_motion, 2e-5);
    }

    #[test]
    fn resolved_structure() {
        let cfg = PipelineConfig::from_toml_str("[video]\nframes = 20\nclip_len = 6\n").unwrap();
        let r = cfg.resolve();
        assert_eq!((r.dilation, r.stride, r.max_padded_len, r.shuffle_window), (4, 3, 40, 6));
        let cfg = PipelineConfig::from_toml_str("[video]\nframes = 1\nclip_len = 1\n[vmcr]\nenabled = false").unwrap();
        assert_eq!(cfg.resolve().stride, 1);
    }

    #[test]
    fn bad_gamma_names_key() {
        let err = PipelineConfig::from_toml_str("[glcd]\ngamma0 = 2.0\n").unwrap_err();
        match err {
            Error::InvalidValue { key, .. } => assert_eq!(key, "glcd.gamma0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = PipelineConfig::from_toml_str("[video]\nframes = 8\n\n[glcd]\ngama0 = 0.1\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 5);
                assert!(message.contains("gama0"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = PipelineConfig::from_toml_str("[video]\nframes = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.glcd.dilation = Some(3);
        cfg.glcd.gamma_override = Some(0.25);
        cfg.noise.filter = FilterKind::IdealBox;
        cfg.denoiser.name = DenoiserKind::LinearGaussian;
        cfg.denoiser.mu = 0.5;
        cfg.run.seed = 1234567890123;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn structural_errors() {
        let bad = |doc: &str, key: &str| match PipelineConfig::from_toml_str(doc).unwrap_err() {
            Error::InvalidValue { key: k, .. } => assert_eq!(k, key, "{doc}"),
            other => panic!("{doc}: {other:?}"),
        };
        bad("[video]\nframes = 4\nclip_len = 8\n", "video.clip_len");
        bad("[glcd]\ndilation = 2\n", "glcd.dilation");
        bad("[glcd]\nmax_padded_len = 10\n", "glcd.max_padded_len");
        bad("[glcd]\nstride = 9\n", "glcd.stride");
        bad("[noise]\ncutoff = 0.0\n", "noise.cutoff");
        bad("[abam]\nlambda = -0.5\n", "abam.lambda");
        bad("[denoiser]\nname = \"bridge\"\n", "denoiser.address");
        bad("[glcd]\nenable_global = false\nenable_local = false\n", "glcd.enable_local");
    }
}
