//! Video motion consistency refinement.
//!
//! Motion vectors are frame differences of the denoised estimate `z0_hat`.
//! Adjacent motion vectors are aligned with a pixel loss (cosine + squared
//! distance) and a frequency loss (amplitude + phase of the per-channel 2-D
//! spatial FFT). The latent is refined by gradient descent on their sum.
//!
//! Losses are sums, not means, so a fixed step size acts more strongly on
//! larger latents. The gradient treats the noise prediction as constant,
//! which makes `z0_hat` affine in `z_t`.
//!
//! Internals run in `f64`; latents stay `f32`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::schedule::{DenoisePrediction, DenoiseSchedule};
use crate::spectral::{Direction, FftNd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// Phase differences wrapped into `(-pi, pi]` before the L1 norm.
    #[default]
    Wrapped,
    /// Raw angle differences, discontinuous at the branch cut.
    Unwrapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmcrParams {
    pub lambda_f: f64,
    pub lambda_mse: f64,
    pub lambda_phase: f64,
    pub omega_motion: f64,
    pub n_iters: usize,
    pub eps_guard: f64,
    pub phase_mode: PhaseMode,
}

impl Default for VmcrParams {
    fn default() -> Self {
        VmcrParams {
            lambda_f: 0.2,
            lambda_mse: 0.001,
            lambda_phase: 1.0,
            omega_motion: 2e-5,
            n_iters: 1,
            eps_guard: 1e-8,
            phase_mode: PhaseMode::Wrapped,
        }
    }
}

impl VmcrParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lambda_f", self.lambda_f),
            ("lambda_mse", self.lambda_mse),
            ("lambda_phase", self.lambda_phase),
            ("omega_motion", self.omega_motion),
            ("eps_guard", self.eps_guard),
        ];
        for (name, v) in checks {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub pixel: f64,
    pub freq: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// L2 norm of the gradient with respect to the latent; 0 when no
    /// gradient was evaluated.
    pub grad_norm: f64,
}

/// Frame differences `delta^i = z0_hat[i + 1] - z0_hat[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionVectors {
    frame_shape: LatentShape,
    deltas: Vec<Vec<f64>>,
}

impl MotionVectors {
    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn frame_shape(&self) -> LatentShape {
        self.frame_shape
    }
}

fn vectors_from_f64(frame_shape: LatentShape, frames: usize, data: &[f64]) -> Result<MotionVectors> {
    if frames < 2 {
        return Err(Error::Size(format!("motion vectors need at least 2 frames, got {frames}")));
    }
    let n = frame_shape.frame_len();
    let deltas = (0..frames - 1)
        .map(|i| {
            let (a, b) = (&data[i * n..(i + 1) * n], &data[(i + 1) * n..(i + 2) * n]);
            b.iter().zip(a).map(|(y, x)| y - x).collect()
        })
        .collect();
    Ok(MotionVectors { frame_shape: frame_shape.with_frames(1), deltas })
}

pub fn motion_vectors(z0_hat: &LatentVideo) -> Result<MotionVectors> {
    vectors_from_f64(z0_hat.shape(), z0_hat.frames(), &z0_hat.to_f64())
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Evaluation {
    pixel: f64,
    amplitude: f64,
    phase: f64,
    /// Gradient of the total loss with respect to each motion vector.
    grad: Option<Vec<Vec<f64>>>,
}

fn evaluate(mv: &MotionVectors, p: &VmcrParams, want_grad: bool) -> Result<Evaluation> {
    let d = &mv.deltas;
    if d.len() < 2 {
        return Err(Error::Size(format!("motion losses need at least 2 motion vectors, got {}", d.len())));
    }
    let n = mv.frame_shape.frame_len();
    let mut grad = want_grad.then(|| vec![vec![0.0f64; n]; d.len()]);

    // Pixel loss.
    let norms: Vec<f64> = d.iter().map(|v| dot(v, v).sqrt()).collect();
    let mut pixel = 0.0;
    for i in 0..d.len() - 1 {
        let (u, v) = (&d[i], &d[i + 1]);
        let (nu, nv) = (norms[i], norms[i + 1]);
        let cos_active = nu >= p.eps_guard && nv >= p.eps_guard;
        let mut cos = 0.0;
        if cos_active {
            cos = dot(u, v) / (nu * nv);
            pixel += 1.0 - cos;
        }
        let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        pixel += p.lambda_mse * sq;
        if let Some(g) = grad.as_mut() {
            let (gu, gv) = two_mut(g, i);
            for e in 0..n {
                let diff = 2.0 * p.lambda_mse * (u[e] - v[e]);
                gu[e] += diff;
                gv[e] -= diff;
                if cos_active {
                    gu[e] -= v[e] / (nu * nv) - cos * u[e] / (nu * nu);
                    gv[e] -= u[e] / (nu * nv) - cos * v[e] / (nv * nv);
                }
            }
        }
    }

    // Frequency loss on per-channel spatial spectra.
    let fs = mv.frame_shape;
    let plane = fs.plane_len();
    let fft = FftNd::new(&[fs.height, fs.width]);
    let spectra: Vec<Vec<Vec<Complex64>>> = d
        .iter()
        .map(|delta| (0..fs.channels).map(|c| fft.forward_real(&delta[c * plane..(c + 1) * plane])).collect())
        .collect();
    let zero = Complex64::new(0.0, 0.0);
    let mut spec_grad = want_grad.then(|| vec![vec![vec![zero; plane]; fs.channels]; d.len()]);
    let mut amplitude = 0.0;
    let mut phase = 0.0;
    let i_unit = Complex64::new(0.0, 1.0);
    for i in 0..d.len() - 1 {
        for c in 0..fs.channels {
            for k in 0..plane {
                let a = spectra[i][c][k];
                let b = spectra[i + 1][c][k];
                let (ma, mb) = (a.norm(), b.norm());
                let amp_diff = ma - mb;
                amplitude += amp_diff.abs();
                let raw = a.arg() - b.arg();
                let pd = match p.phase_mode {
                    PhaseMode::Wrapped => wrap_phase(raw),
                    PhaseMode::Unwrapped => raw,
                };
                phase += pd.abs();
                if let Some(sg) = spec_grad.as_mut() {
                    let sa = sign(amp_diff);
                    let sp = sign(pd) * p.lambda_phase;
                    let mut ga = zero;
                    let mut gb = zero;
                    if ma > 0.0 {
                        ga += a / ma * sa + i_unit * a / (ma * ma) * sp;
                    }
                    if mb > 0.0 {
                        gb -= b / mb * sa + i_unit * b / (mb * mb) * sp;
                    }
                    sg[i][c][k] += ga;
                    sg[i + 1][c][k] += gb;
                }
            }
        }
    }

    if let (Some(g), Some(mut sg)) = (grad.as_mut(), spec_grad) {
        for (gi, per_channel) in g.iter_mut().zip(sg.iter_mut()) {
            for (c, spectrum) in per_channel.iter_mut().enumerate() {
                // d loss / d x = Re(unnormalized inverse DFT of dL/dRe + i dL/dIm).
                fft.process(spectrum, Direction::Inverse, false);
                for (slot, v) in gi[c * plane..(c + 1) * plane].iter_mut().zip(spectrum.iter()) {
                    *slot += p.lambda_f * v.re;
                }
            }
        }
    }

    Ok(Evaluation { pixel, amplitude, phase, grad })
}

fn two_mut(g: &mut [Vec<f64>], i: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    let (lo, hi) = g.split_at_mut(i + 1);
    (&mut lo[i], &mut hi[0])
}

fn report(e: &Evaluation, p: &VmcrParams, grad_norm: f64) -> LossReport {
    let freq = e.amplitude + p.lambda_phase * e.phase;
    LossReport {
        total: e.pixel + p.lambda_f * freq,
        pixel: e.pixel,
        freq,
        amplitude: e.amplitude,
        phase: e.phase,
        grad_norm,
    }
}

/// `sum_i (1 - cos(d_i, d_{i+1})) + lambda_mse * ||d_i - d_{i+1}||^2`.
pub fn pixel_loss(mv: &MotionVectors, p: &VmcrParams) -> Result<f64> {
    Ok(evaluate(mv, p, false)?.pixel)
}

/// `(amplitude, phase)` L1 spectral discrepancies between adjacent motion
/// vectors (phase not yet weighted by `lambda_phase`).
pub fn freq_loss(mv: &MotionVectors, p: &VmcrParams) -> Result<(f64, f64)> {
    let e = evaluate(mv, p, false)?;
    Ok((e.amplitude, e.phase))
}

pub fn motion_loss(mv: &MotionVectors, p: &VmcrParams) -> Result<LossReport> {
    let e = evaluate(mv, p, false)?;
    Ok(report(&e, p, 0.0))
}

/// Denoised estimate in `f64` plus the chain-rule factor `d z0_hat / d z_t`.
fn z0_hat_f64(z: &LatentVideo, pred: &DenoisePrediction, t: usize, sched: &DenoiseSchedule) -> Result<(Vec<f64>, f64)> {
    z.ensure_same_shape(&pred.eps)?;
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Schedule(format!("alpha_bar[{t}] = {ab} is not positive")));
    }
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x = z.data().iter().zip(pred.eps.data()).map(|(&zv, &ev)| (zv as f64 - s * ev as f64) / a).collect();
    Ok((x, 1.0 / a))
}

fn loss_and_grad(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t: usize,
    sched: &DenoiseSchedule,
    p: &VmcrParams,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let s = z.shape();
    if s.frames < 3 {
        return Err(Error::Size(format!("motion refinement needs at least 3 frames, got {}", s.frames)));
    }
    let (x, scale) = z0_hat_f64(z, pred, t, sched)?;
    let mv = vectors_from_f64(s, s.frames, &x)?;
    let e = evaluate(&mv, p, want_grad)?;
    let grad = e.grad.as_ref().map(|gd| {
        let n = s.frame_len();
        let mut g = vec![0.0f64; s.len()];
        for f in 0..s.frames {
            let out = &mut g[f * n..(f + 1) * n];
            if f >= 1 {
                out.iter_mut().zip(&gd[f - 1]).for_each(|(o, v)| *o += v);
            }
            if f + 1 < s.frames {
                out.iter_mut().zip(&gd[f]).for_each(|(o, v)| *o -= v);
            }
            out.iter_mut().for_each(|o| *o *= scale);
        }
        g
    });
    let grad_norm = grad.as_ref().map_or(0.0, |g| dot(g, g).sqrt());
    let rep = report(&e, p, grad_norm);
    if !rep.total.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Numeric {
            context: format!("motion loss at t={t}"),
            message: format!("non-finite loss {} or gradient norm {grad_norm}", rep.total),
        });
    }
    Ok((rep, grad))
}

/// Motion loss of latent `z_t` through `z0_hat(z_t)`.
pub fn motion_loss_at(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t: usize,
    sched: &DenoiseSchedule,
    p: &VmcrParams,
) -> Result<LossReport> {
    Ok(loss_and_grad(z, pred, t, sched, p, false)?.0)
}

/// `grad_{z_t} loss_motion` with the noise prediction held fixed.
pub fn motion_loss_grad(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t: usize,
    sched: &DenoiseSchedule,
    p: &VmcrParams,
) -> Result<LatentVideo> {
    let (_, g) = loss_and_grad(z, pred, t, sched, p, true)?;
    let data = g.expect("gradient requested").into_iter().map(|v| v as f32).collect();
    LatentVideo::new(z.shape(), data).map_err(|_| Error::Numeric {
        context: format!("motion gradient at t={t}"),
        message: "gradient overflowed f32".into(),
    })
}

/// Applies `n_iters` steps of `z <- z - omega * grad`. Returns the refined
/// latent and the loss report evaluated at it.
pub fn vmcr_refine(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t: usize,
    sched: &DenoiseSchedule,
    p: &VmcrParams,
) -> Result<(LatentVideo, LossReport)> {
    p.validate()?;
    let mut current = z.clone();
    for iter in 0..p.n_iters {
        let grad = motion_loss_grad(&current, pred, t, sched, p)?;
        let omega = p.omega_motion as f32;
        current = current.zip_map(&grad, |v, g| v - omega * g).map_err(|_| Error::Numeric {
            context: format!("refinement iteration {iter} at t={t}"),
            message: "latent became non-finite".into(),
        })?;
    }
    let (rep, _) = loss_and_grad(&current, pred, t, sched, p, true)?;
    Ok((current, rep))
}

/// Result of [`backtracking_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct DescentStep {
    pub z: LatentVideo,
    pub omega: f64,
    pub halvings: usize,
    pub before: f64,
    pub after: f64,
}

impl DescentStep {
    pub fn decreased(&self) -> bool {
        self.after < self.before
    }
}

/// One step `z - omega * grad`, starting at `omega0` and halving `omega`
/// until the motion loss strictly decreases or `max_halvings` is spent.
pub fn backtracking_step(
    z: &LatentVideo,
    pred: &DenoisePrediction,
    t: usize,
    sched: &DenoiseSchedule,
    p: &VmcrParams,
    omega0: f64,
    max_halvings: usize,
) -> Result<DescentStep> {
    p.validate()?;
    let before = motion_loss_at(z, pred, t, sched, p)?.total;
    let grad = motion_loss_grad(z, pred, t, sched, p)?;
    let mut omega = omega0;
    let mut last = None;
    for halvings in 0..=max_halvings {
        let w = omega as f32;
        let candidate = z.zip_map(&grad, |v, g| v - w * g)?;
        let after = motion_loss_at(&candidate, pred, t, sched, p)?.total;
        let step = DescentStep { z: candidate, omega, halvings, before, after };
        if step.decreased() {
            return Ok(step);
        }
        last = Some(step);
        omega *= 0.5;
    }
    Ok(last.expect("at least one trial"))
}
