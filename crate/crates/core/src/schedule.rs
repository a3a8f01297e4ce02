//! Noise schedule and the deterministic DDIM update.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::LatentVideo;

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..=T` plus the visited
/// timesteps in descending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseSchedule {
    alpha_bar: Vec<f64>,
    step_indices: Vec<usize>,
}

/// Linear-beta schedule with `alpha_bar[t] = prod_{i<=t} (1 - beta_i)`.
/// Every timestep `T..=1` is visited; use [`DenoiseSchedule::with_inference_steps`]
/// to subsample.
pub fn alpha_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<DenoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::Parameter("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(train_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0f64;
    for i in 0..train_steps {
        let frac = if train_steps == 1 { 0.0 } else { i as f64 / (train_steps - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let sched = DenoiseSchedule { alpha_bar, step_indices: (1..=train_steps).rev().collect() };
    sched.validate()?;
    Ok(sched)
}

impl DenoiseSchedule {
    /// Builds a schedule from explicit `alpha_bar` values (index 0 must be 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, step_indices: Vec<usize>) -> Result<Self> {
        let sched = DenoiseSchedule { alpha_bar, step_indices };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar.first() != Some(&1.0) {
            return Err(Error::Schedule("alpha_bar[0] must be 1".into()));
        }
        for (t, w) in self.alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] < w[0]) {
                return Err(Error::Schedule(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]; violated at t={}",
                    t + 1
                )));
            }
        }
        if self.step_indices.is_empty() {
            return Err(Error::Schedule("no inference steps".into()));
        }
        for w in self.step_indices.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Schedule("step indices must be strictly decreasing".into()));
            }
        }
        let last = *self.step_indices.last().unwrap();
        let first = self.step_indices[0];
        if last == 0 || first > self.train_steps() {
            return Err(Error::Schedule(format!("step indices must lie in [1, {}]", self.train_steps())));
        }
        Ok(())
    }

    /// Keeps `n` uniformly strided timesteps: `t_k = T - floor(k * T / n)`.
    pub fn with_inference_steps(mut self, n: usize) -> Result<Self> {
        let total = self.train_steps();
        if n == 0 || n > total {
            return Err(Error::Parameter(format!("inference steps must be in [1, {total}], got {n}")));
        }
        self.step_indices = (0..n).map(|k| total - k * total / n).collect();
        self.validate()?;
        Ok(self)
    }

    pub fn train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("timestep {t} outside [0, {}]", self.train_steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_indices
    }

    pub fn num_steps(&self) -> usize {
        self.step_indices.len()
    }

    /// `(t_from, t_to)` pairs in visiting order; the last one lands on `t = 0`.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.step_indices.len());
        for (i, &t) in self.step_indices.iter().enumerate() {
            let next = self.step_indices.get(i + 1).copied().unwrap_or(0);
            out.push((t, next));
        }
        out
    }
}

/// Noise prediction `eps = Phi(z_t, t, y)` for a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisePrediction {
    pub eps: LatentVideo,
    pub t: usize,
}

impl DenoisePrediction {
    pub fn new(eps: LatentVideo, t: usize) -> Self {
        DenoisePrediction { eps, t }
    }
}

/// Coefficients `(a, b)` of `z_to = a * z_from + b * eps`:
/// `a = sqrt(ab_to / ab_from)`, `b = sqrt(1/ab_to - 1) - sqrt(1/ab_from - 1)`.
pub fn ddim_coefficients(sched: &DenoiseSchedule, t_from: usize, t_to: usize) -> Result<(f32, f32)> {
    if t_to > t_from {
        return Err(Error::Schedule(format!("ddim step must go backwards, got {t_from} -> {t_to}")));
    }
    let from = sched.alpha_bar(t_from)?;
    let to = sched.alpha_bar(t_to)?;
    let a = (to / from).sqrt();
    let b = (1.0 / to - 1.0).sqrt() - (1.0 / from - 1.0).sqrt();
    Ok((a as f32, b as f32))
}

/// One deterministic DDIM transition `z_{t_from} -> z_{t_to}`.
pub fn ddim_step(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t_from: usize,
    t_to: usize,
    sched: &DenoiseSchedule,
) -> Result<LatentVideo> {
    z.ensure_same_shape(&pred.eps)?;
    pred.eps.ensure_finite("noise prediction")?;
    let (a, b) = ddim_coefficients(sched, t_from, t_to)?;
    z.zip_map(&pred.eps, |zv, ev| a * zv + b * ev)
}

/// Denoised estimate `z0_hat = (z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)`.
pub fn predict_z0(z: &LatentVideo, pred: &DenoisePrediction, t: usize, sched: &DenoiseSchedule) -> Result<LatentVideo> {
    z.ensure_same_shape(&pred.eps)?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Schedule(format!("alpha_bar[{t}] = {ab} is not positive")));
    }
    let s = (1.0 - ab).sqrt() as f32;
    let a = ab.sqrt() as f32;
    z.zip_map(&pred.eps, |zv, ev| (zv - s * ev) / a)
}
