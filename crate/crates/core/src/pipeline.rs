//! End-to-end sampling: noise initialization, per-step global and local clip
//! denoising, path fusion, motion refinement and per-step diagnostics.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::clip_maps::{
    clip_weights, gather, make_global_maps, make_local_maps, ClipMap, PathKind, ShiftPlan, WeightProfile,
};
use crate::config::{AbamPaths, DenoiserKind, PipelineConfig, Resolved};
use crate::denoiser::bridge::BridgeDenoiser;
use crate::denoiser::{
    capture_anchor, validate_prediction, AnchorSlot, DenoiseRequest, Denoiser, LinearGaussianDenoiser,
    SeededNoisyDenoiser, ToyAttentionDenoiser, ToyAttentionParams, ZeroDenoiser,
};
use crate::error::{Error, Result};
use crate::fusion::{annealing_gamma, fuse_path, glcd_fuse, path_residual, PathBatch};
use crate::latent::{LatentShape, LatentVideo};
use crate::noise_reinit::{frequency_fuse, local_noise_shuffle, make_lpf, FrequencyFilter, NoiseInit};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::schedule::{alpha_schedule, ddim_step, DenoisePrediction, DenoiseSchedule};
use crate::vmcr::{vmcr_refine, LossReport};

/// Diagnostics for one sampling step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub t_from: usize,
    pub t_to: usize,
    pub gamma: f64,
    pub global_clips: usize,
    pub local_clips: usize,
    /// Weighted L2 disagreement between each path's clips and its fused
    /// result.
    pub residual_global: Option<f64>,
    pub residual_local: Option<f64>,
    pub vmcr: Option<LossReport>,
    /// Largest magnitude of the step's output over the largest input
    /// magnitude (latent or noise prediction).
    pub growth: f64,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub z0: LatentVideo,
    pub reports: Vec<StepReport>,
    pub seed: u64,
}

/// A failed run: the error plus the reports of the steps that completed.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub reports: Vec<StepReport>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed steps)", self.error, self.reports.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Latent between steps.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub z: LatentVideo,
    /// Timestep `z` sits at.
    pub t: usize,
    /// Index of the next step.
    pub step: usize,
    pub last_report: Option<StepReport>,
}

/// Step-time knobs the config does not carry.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepOverrides {
    /// Forces the blend coefficient, bypassing annealing.
    pub gamma: Option<f64>,
}

pub fn build_schedule(cfg: &PipelineConfig) -> Result<DenoiseSchedule> {
    let s = &cfg.schedule;
    alpha_schedule(s.train_steps, s.beta_start, s.beta_end)?.with_inference_steps(s.steps)
}

/// Instantiates the denoiser named in the config.
pub fn build_denoiser(cfg: &PipelineConfig, schedule: Arc<DenoiseSchedule>) -> Result<Box<dyn Denoiser>> {
    let d = &cfg.denoiser;
    Ok(match d.name {
        DenoiserKind::Zero => Box::new(ZeroDenoiser),
        DenoiserKind::LinearGaussian => Box::new(LinearGaussianDenoiser::new(d.mu, d.sigma, schedule)?),
        DenoiserKind::SeededNoisy => Box::new(SeededNoisyDenoiser { seed: cfg.run.seed, scale: d.noise_scale as f32 }),
        DenoiserKind::ToyAttention => Box::new(ToyAttentionDenoiser::new(
            ToyAttentionParams::seeded(cfg.video.channels, d.attention_seed),
            schedule,
        )),
        DenoiserKind::Bridge => {
            let timeout = Some(Duration::from_secs_f64(d.timeout_secs));
            match (&d.address, &d.command) {
                (Some(addr), _) => Box::new(BridgeDenoiser::connect_tcp(addr, timeout)?),
                (None, Some(cmd)) if !cmd.is_empty() => Box::new(BridgeDenoiser::spawn(&cmd[0], &cmd[1..])?),
                _ => return Err(Error::invalid("denoiser.address", "bridge needs `address` or `command`")),
            }
        }
    })
}

/// A configured sampler. Holds everything that does not change between
/// steps.
pub struct Pipeline {
    cfg: PipelineConfig,
    resolved: Resolved,
    shape: LatentShape,
    schedule: Arc<DenoiseSchedule>,
    weights: WeightProfile,
    shift_plan: ShiftPlan,
    conditioning: Arc<str>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = Arc::new(build_schedule(&cfg)?);
        Pipeline::with_schedule(cfg, schedule)
    }

    /// Uses an explicit schedule instead of the one described by the config.
    pub fn with_schedule(cfg: PipelineConfig, schedule: Arc<DenoiseSchedule>) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape()?;
        Ok(Pipeline {
            resolved: cfg.resolve(),
            shape,
            weights: clip_weights(cfg.video.clip_len, cfg.glcd.weights)?,
            shift_plan: ShiftPlan::new(cfg.run.seed).with_mode(cfg.glcd.shift_mode),
            conditioning: Arc::from(cfg.denoiser.conditioning.as_str()),
            schedule,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn resolved(&self) -> Resolved {
        self.resolved
    }

    pub fn schedule(&self) -> &Arc<DenoiseSchedule> {
        &self.schedule
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn filter(&self) -> Result<FrequencyFilter> {
        let s = self.shape;
        make_lpf([s.frames, s.height, s.width], self.cfg.noise.filter, self.cfg.noise.cutoff)
    }

    pub fn global_maps(&self) -> Result<Vec<ClipMap>> {
        let r = self.resolved;
        make_global_maps(self.shape.frames, self.cfg.video.clip_len, r.dilation, r.max_padded_len)
    }

    pub fn local_maps(&self, t: usize) -> Result<Vec<ClipMap>> {
        make_local_maps(self.shape.frames, self.cfg.video.clip_len, self.resolved.stride, t, &self.shift_plan)
    }

    /// Blend coefficient used at timestep `t`.
    pub fn gamma(&self, t: usize, overrides: &StepOverrides) -> f64 {
        match (self.cfg.glcd.enable_global, self.cfg.glcd.enable_local) {
            (true, false) => 1.0,
            (false, true) => 0.0,
            _ => overrides
                .gamma
                .or(self.cfg.glcd.gamma_override)
                .unwrap_or_else(|| annealing_gamma(t, &self.cfg.anneal())),
        }
    }

    /// Starting latent: shuffled local noise, optionally fused with global
    /// noise in frequency space.
    pub fn initial_latent(&self) -> Result<LatentVideo> {
        let seed = self.cfg.run.seed;
        let noise = &self.cfg.noise;
        let z = if noise.shuffle {
            let init = NoiseInit::sample(seed, self.shape, self.resolved.shuffle_window)?;
            local_noise_shuffle(&init, self.shape.frames)?
        } else {
            standard_normal(self.shape, &mut stream_rng(seed, Stream::LocalNoise, 0))
        };
        if !noise.frequency_fusion {
            return Ok(z);
        }
        let eta = standard_normal(self.shape, &mut stream_rng(seed, Stream::GlobalNoise, 0));
        frequency_fuse(&z, &eta, &self.filter()?)
    }

    pub fn initial_state(&self) -> Result<PipelineState> {
        let t = self.schedule.step_indices()[0];
        Ok(PipelineState { z: self.initial_latent()?, t, step: 0, last_report: None })
    }

    /// Runs every step from the initial latent.
    pub fn run(&self, denoiser: &dyn Denoiser) -> std::result::Result<RunResult, RunFailure> {
        let mut reports = Vec::with_capacity(self.schedule.num_steps());
        let mut state = match self.initial_state() {
            Ok(s) => s,
            Err(error) => return Err(RunFailure { error, reports }),
        };
        let overrides = StepOverrides::default();
        for (step, (t_from, _)) in self.schedule.transitions().into_iter().enumerate() {
            match self.step(&state, denoiser, &overrides) {
                Ok(next) => {
                    reports.push(next.last_report.clone().expect("step fills its report"));
                    state = next;
                }
                Err(error) => {
                    let error = Error::Step { step, t: t_from, source: Box::new(error) };
                    return Err(RunFailure { error, reports });
                }
            }
        }
        Ok(RunResult { z0: state.z, reports, seed: self.cfg.run.seed })
    }

    /// One step `z_t -> z_{t'}` where `t'` is the next visited timestep.
    pub fn step(
        &self,
        state: &PipelineState,
        denoiser: &dyn Denoiser,
        overrides: &StepOverrides,
    ) -> Result<PipelineState> {
        let started = Instant::now();
        let transitions = self.schedule.transitions();
        let &(t_from, t_to) = transitions
            .get(state.step)
            .ok_or_else(|| Error::Schedule(format!("step {} past the last step", state.step)))?;
        if state.t != t_from {
            return Err(Error::Schedule(format!(
                "state is at t={} but step {} starts at t={t_from}",
                state.t, state.step
            )));
        }
        let z = &state.z;
        let frames = self.shape.frames;
        let mut input_max = z.max_abs();

        let global = if self.cfg.glcd.enable_global {
            let maps = self.global_maps()?;
            let (batch, pmax) = self.denoise_path(z, maps, t_from, t_to, denoiser, PathKind::Global)?;
            input_max = input_max.max(pmax);
            let fused = fuse_path(&batch, frames)?;
            let residual = path_residual(&fused, &batch)?;
            Some((fused, batch.len(), residual))
        } else {
            None
        };
        let local_maps = self.local_maps(t_from)?;
        let local = if self.cfg.glcd.enable_local {
            let (batch, pmax) = self.denoise_path(z, local_maps.clone(), t_from, t_to, denoiser, PathKind::Local)?;
            input_max = input_max.max(pmax);
            let fused = fuse_path(&batch, frames)?;
            let residual = path_residual(&fused, &batch)?;
            Some((fused, batch.len(), residual))
        } else {
            None
        };

        let gamma = self.gamma(t_from, overrides);
        let fused = match (&global, &local) {
            (Some((g, ..)), Some((l, ..))) => glcd_fuse(g, l, gamma)?.latent,
            (Some((g, ..)), None) => g.clone(),
            (None, Some((l, ..))) => l.clone(),
            (None, None) => unreachable!("config validation requires one path"),
        };

        let (z_next, vmcr) = if self.cfg.vmcr.enabled {
            let tiles = if self.cfg.glcd.enable_local { local_maps } else { self.global_maps()? };
            let eps = self.tiled_prediction(&fused, tiles, t_to, denoiser)?;
            let (refined, report) = vmcr_refine(&fused, &eps, t_to, &self.schedule, &self.cfg.vmcr.params())?;
            (refined, Some(report))
        } else {
            (fused, None)
        };
        z_next.ensure_finite(&format!("latent after step {}", state.step))?;

        let growth = if input_max > 0.0 { (z_next.max_abs() / input_max) as f64 } else { 0.0 };
        let report = StepReport {
            step: state.step,
            t_from,
            t_to,
            gamma,
            global_clips: global.as_ref().map_or(0, |g| g.1),
            local_clips: local.as_ref().map_or(0, |l| l.1),
            residual_global: global.map(|g| g.2),
            residual_local: local.map(|l| l.2),
            vmcr,
            growth,
            wall_time: started.elapsed(),
        };
        Ok(PipelineState { z: z_next, t: t_to, step: state.step + 1, last_report: Some(report) })
    }

    fn abam_on(&self, path: PathKind, denoiser: &dyn Denoiser) -> bool {
        let abam = &self.cfg.abam;
        abam.enabled
            && denoiser.capabilities().exposes_attention
            && (path == PathKind::Local || abam.paths == AbamPaths::Both)
    }

    fn requests(&self, z: &LatentVideo, maps: &[ClipMap], t: usize) -> Result<Vec<DenoiseRequest>> {
        maps.iter()
            .map(|m| {
                Ok(DenoiseRequest::new(gather(z, m)?, t)
                    .with_clip_id(m.clip_id(), m.path())
                    .with_conditioning(self.conditioning.clone()))
            })
            .collect()
    }

    /// Denoises every request, in parallel when allowed, keeping input order.
    fn predict_all(&self, requests: &[DenoiseRequest], denoiser: &dyn Denoiser) -> Result<Vec<DenoisePrediction>> {
        let one = |req: &DenoiseRequest| {
            let pred = denoiser.denoise(req)?;
            validate_prediction(req, &pred)?;
            Ok(pred)
        };
        if self.cfg.run.parallel && denoiser.capabilities().concurrent_safe {
            requests.par_iter().map(one).collect()
        } else {
            requests.iter().map(one).collect()
        }
    }

    /// Gathers, denoises and DDIM-steps every clip of one path. Also returns
    /// the largest predicted-noise magnitude.
    fn denoise_path(
        &self,
        z: &LatentVideo,
        maps: Vec<ClipMap>,
        t_from: usize,
        t_to: usize,
        denoiser: &dyn Denoiser,
        path: PathKind,
    ) -> Result<(PathBatch, f32)> {
        let mut requests = self.requests(z, &maps, t_from)?;
        if self.abam_on(path, denoiser) && requests.len() > 1 {
            // The anchor is complete before any consumer request is built.
            let mut slot = AnchorSlot::new();
            let anchor = capture_anchor(denoiser, &requests[0], self.cfg.abam.lambda as f32)?;
            slot.capture(t_from, path, anchor);
            let shared = slot.get(t_from, path)?;
            for req in requests.iter_mut().skip(1) {
                req.anchor_kv = Some(shared.clone());
            }
        }
        let preds = self.predict_all(&requests, denoiser)?;
        let mut pmax = 0.0f32;
        let mut clips = Vec::with_capacity(preds.len());
        for (req, pred) in requests.iter().zip(&preds) {
            pmax = pmax.max(pred.eps.max_abs());
            clips.push(ddim_step(&req.clip, pred, t_from, t_to, &self.schedule)?);
        }
        let weights = vec![self.weights.clone(); clips.len()];
        Ok((PathBatch::new(clips, maps, weights)?, pmax))
    }

    /// Full-length noise prediction at `t` assembled from clip tiles.
    fn tiled_prediction(
        &self,
        z: &LatentVideo,
        maps: Vec<ClipMap>,
        t: usize,
        denoiser: &dyn Denoiser,
    ) -> Result<DenoisePrediction> {
        let requests = self.requests(z, &maps, t)?;
        let preds = self.predict_all(&requests, denoiser)?;
        let eps_clips = preds.into_iter().map(|p| p.eps).collect();
        let weights = vec![self.weights.clone(); maps.len()];
        let eps = fuse_path(&PathBatch::new(eps_clips, maps, weights)?, self.shape.frames)?;
        Ok(DenoisePrediction::new(eps, t))
    }
}

/// Report of the most recent step of `state`.
pub fn diagnostics(state: &PipelineState) -> Option<&StepReport> {
    state.last_report.as_ref()
}

/// Single-clip DDIM sampling from `N(0, I)` drawn on the local-noise stream,
/// the reference the pipeline reduces to when every mechanism is disabled.
pub fn plain_ddim(
    shape: LatentShape,
    seed: u64,
    schedule: &DenoiseSchedule,
    denoiser: &dyn Denoiser,
) -> Result<LatentVideo> {
    let mut z = standard_normal(shape, &mut stream_rng(seed, Stream::LocalNoise, 0));
    for (t_from, t_to) in schedule.transitions() {
        let req = DenoiseRequest::new(z, t_from);
        let pred = denoiser.denoise(&req)?;
        validate_prediction(&req, &pred)?;
        z = ddim_step(&req.clip, &pred, t_from, t_to, schedule)?;
    }
    Ok(z)
}
