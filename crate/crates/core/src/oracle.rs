//! Slow, independent reference computations used to check the production
//! paths: dense least squares, direct DFTs, a scalar motion loss and
//! central finite differences. Everything here is `f64` and written for
//! clarity rather than speed.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::denoiser::{AnchorKV, ToyAttentionParams};
use crate::error::{Error, Result};
use crate::fusion::PathBatch;
use crate::latent::{LatentShape, LatentVideo};
use crate::vmcr::{PhaseMode, VmcrParams};

/// Minimizer of `sum_k ||sqrt(s_k w_k) (F_k(z) - z_k)||^2` over both paths
/// (`s = gamma` for global clips, `1 - gamma` for local ones), solved as one
/// stacked dense system with an SVD. Returns `z` in row-major order.
pub fn dense_lsq_fuse(global: &PathBatch, local: &PathBatch, gamma: f64, frames: usize) -> Result<Vec<f64>> {
    let first = global.clips.first().or(local.clips.first()).ok_or_else(|| Error::Size("no clips".into()))?;
    let n = first.shape().frame_len();
    let mut rows: Vec<(usize, f64, &[f32])> = Vec::new();
    for (batch, scale) in [(global, gamma), (local, 1.0 - gamma)] {
        for ((clip, map), w) in batch.clips.iter().zip(&batch.maps).zip(&batch.weights) {
            for (j, &wj) in w.values().iter().enumerate() {
                rows.push((map.real_frame(j), (scale * wj as f64).sqrt(), clip.frame(j)));
            }
        }
    }
    let a = DMatrix::from_fn(rows.len(), frames, |r, c| if rows[r].0 == c { rows[r].1 } else { 0.0 });
    let b = DMatrix::from_fn(rows.len(), n, |r, p| rows[r].1 * rows[r].2[p] as f64);
    // Householder QR of the tall system; the diagonal of R exposes
    // uncovered frames.
    let qr = a.qr();
    let r = qr.r();
    if let Some(f) = (0..frames).find(|&f| r[(f, f)].abs() < 1e-12) {
        return Err(Error::Coverage { frame: f });
    }
    let x = r
        .solve_upper_triangular(&(qr.q().transpose() * b))
        .ok_or_else(|| Error::Numeric { context: "dense least squares".into(), message: "singular R".into() })?;
    Ok((0..frames).flat_map(|f| (0..n).map(move |p| (f, p))).map(|(f, p)| x[(f, p)]).collect())
}

/// Direct forward DFT over a row-major array of extents `dims`, one axis at
/// a time with explicit `exp(-2 pi i k x / n)` sums.
pub fn dft_nd(data: &[Complex64], dims: &[usize]) -> Vec<Complex64> {
    let len: usize = dims.iter().product();
    assert_eq!(data.len(), len);
    let mut cur = data.to_vec();
    for (axis, &n) in dims.iter().enumerate() {
        let inner: usize = dims[axis + 1..].iter().product();
        let outer = len / (n * inner);
        let twiddle: Vec<Complex64> = (0..n * n)
            .map(|kx| Complex64::from_polar(1.0, -2.0 * PI * ((kx / n) * (kx % n) % n) as f64 / n as f64))
            .collect();
        let mut next = vec![Complex64::new(0.0, 0.0); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for k in 0..n {
                    next[base + k * inner] = (0..n).map(|x| cur[base + x * inner] * twiddle[k * n + x]).sum();
                }
            }
        }
        cur = next;
    }
    cur
}

pub fn dft_real(data: &[f64], dims: &[usize]) -> Vec<Complex64> {
    let c: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft_nd(&c, dims)
}

/// Per-channel `(K, H, W)` volume of `z` in `f64`.
pub fn channel_volume(z: &LatentVideo, c: usize) -> Vec<f64> {
    let s = z.shape();
    let mut out = Vec::with_capacity(s.frames * s.plane_len());
    for k in 0..s.frames {
        for y in 0..s.height {
            for x in 0..s.width {
                out.push(z.get(k, c, y, x) as f64);
            }
        }
    }
    out
}

fn wrap(x: f64) -> f64 {
    let mut v = x % (2.0 * PI);
    if v <= -PI {
        v += 2.0 * PI;
    } else if v > PI {
        v -= 2.0 * PI;
    }
    v
}

/// Spatial spectra of the motion vectors of `x0 = (z - sqrt(1-ab) eps) /
/// sqrt(ab)`, indexed `[delta][channel][bin]`, plus the deltas themselves.
fn motion_spectra(z: &[f64], eps: &[f64], shape: LatentShape, ab: f64) -> (Vec<Vec<f64>>, Vec<Vec<Vec<Complex64>>>) {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x: Vec<f64> = z.iter().zip(eps).map(|(zv, ev)| (zv - s * ev) / a).collect();
    let n = shape.frame_len();
    let plane = shape.plane_len();
    let deltas: Vec<Vec<f64>> =
        (0..shape.frames - 1).map(|i| (0..n).map(|e| x[(i + 1) * n + e] - x[i * n + e]).collect()).collect();
    let spectra = deltas
        .iter()
        .map(|d| {
            (0..shape.channels)
                .map(|c| dft_real(&d[c * plane..(c + 1) * plane], &[shape.height, shape.width]))
                .collect()
        })
        .collect();
    (deltas, spectra)
}

/// Total motion loss of latent `z` (flat, `f64`) under a fixed noise
/// prediction, straight from the definitions.
pub fn motion_loss_ref(z: &[f64], eps: &[f64], shape: LatentShape, ab: f64, p: &VmcrParams) -> f64 {
    let (deltas, spectra) = motion_spectra(z, eps, shape, ab);
    let mut pixel = 0.0;
    for w in deltas.windows(2) {
        let (u, v) = (&w[0], &w[1]);
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nu >= p.eps_guard && nv >= p.eps_guard {
            pixel += 1.0 - u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
        }
        pixel += p.lambda_mse * u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let (mut amp, mut phase) = (0.0, 0.0);
    for w in spectra.windows(2) {
        for (sa, sb) in w[0].iter().zip(&w[1]) {
            for (a, b) in sa.iter().zip(sb) {
                amp += (a.norm() - b.norm()).abs();
                let d = a.arg() - b.arg();
                phase += match p.phase_mode {
                    PhaseMode::Wrapped => wrap(d),
                    PhaseMode::Unwrapped => d,
                }
                .abs();
            }
        }
    }
    pixel + p.lambda_f * (amp + p.lambda_phase * phase)
}

/// Whether the motion loss is smooth on every central-difference stencil
/// `z +- h e_i`: no absolute value, phase wrap or cosine guard is crossed.
/// A single coordinate step moves any spectral bin by at most
/// `h / sqrt(ab)`.
pub fn stencil_is_smooth(z: &[f64], eps: &[f64], shape: LatentShape, ab: f64, h: f64, p: &VmcrParams) -> bool {
    let (deltas, spectra) = motion_spectra(z, eps, shape, ab);
    let du = 2.0 * h / ab.sqrt();
    if deltas.iter().any(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt() < p.eps_guard + du * 4.0) {
        return false;
    }
    let (hh, ww) = (shape.height, shape.width);
    let self_conjugate = |k: usize| {
        let (y, x) = (k / ww, k % ww);
        (2 * y) % hh == 0 && (2 * x) % ww == 0
    };
    for w in spectra.windows(2) {
        for (sa, sb) in w[0].iter().zip(&w[1]) {
            for (k, (a, b)) in sa.iter().zip(sb).enumerate() {
                let (ma, mb) = (a.norm(), b.norm());
                if (ma - mb).abs() <= 2.0 * du || ma <= 4.0 * du || mb <= 4.0 * du {
                    return false;
                }
                if self_conjugate(k) {
                    continue;
                }
                // Angle moves by at most asin(du / m) < 2 du / m.
                let dphi = 2.0 * du / ma + 2.0 * du / mb;
                let d = wrap(a.arg() - b.arg()).abs();
                let near_wrap = p.phase_mode == PhaseMode::Wrapped && PI - d <= 2.0 * dphi;
                if d <= 2.0 * dphi || near_wrap {
                    return false;
                }
            }
        }
    }
    true
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |b|`.
pub fn normwise_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// The toy attention block evaluated in `f64`, anchor blend included.
pub fn attention_ref(clip: &LatentVideo, params: &ToyAttentionParams, anchor: Option<&AnchorKV>) -> Vec<f64> {
    let s = clip.shape();
    let c = s.channels;
    let plane = s.plane_len() as f64;
    let emb: Vec<Vec<f64>> = (0..s.frames)
        .map(|k| {
            (0..c)
                .map(|ch| {
                    clip.frame(k)[ch * s.plane_len()..(ch + 1) * s.plane_len()].iter().map(|&v| v as f64).sum::<f64>()
                        / plane
                })
                .collect()
        })
        .collect();
    let project = |w: &[f32]| -> Vec<Vec<f64>> {
        emb.iter().map(|e| (0..c).map(|o| (0..c).map(|i| e[i] * w[i * c + o] as f64).sum()).collect()).collect()
    };
    let q = project(&params.wq);
    let (mut k, mut v) = (project(&params.wk), project(&params.wv));
    if let Some(a) = anchor {
        let l = a.lambda as f64;
        for (f, (kr, vr)) in k.iter_mut().zip(v.iter_mut()).enumerate() {
            for o in 0..c {
                kr[o] = l * kr[o] + (1.0 - l) * a.keys.row(f)[o] as f64;
                vr[o] = l * vr[o] + (1.0 - l) * a.values.row(f)[o] as f64;
            }
        }
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = clip.to_f64();
    for i in 0..s.frames {
        let logits: Vec<f64> =
            k.iter().map(|kr| q[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for ch in 0..c {
            let o: f64 = e.iter().zip(&v).map(|(w, vr)| w / total * vr[ch]).sum();
            let start = (i * c + ch) * s.plane_len();
            out[start..start + s.plane_len()].iter_mut().for_each(|x| *x += o);
        }
    }
    out
}

/// Final latent of single-clip DDIM from `z_T` with the exact Gaussian
/// posterior noise predictor, evaluated in `f64`.
pub fn gaussian_ddim_ref(
    z_t: &[f64],
    alpha_bars: &[f64],
    transitions: &[(usize, usize)],
    mu: f64,
    sigma: f64,
) -> Vec<f64> {
    let mut z = z_t.to_vec();
    for &(from, to) in transitions {
        let (af, at) = (alpha_bars[from], alpha_bars[to]);
        let gain = (1.0 - af).sqrt() / (1.0 - af * (1.0 - sigma * sigma));
        let a = (at / af).sqrt();
        let b = (1.0 / at - 1.0).sqrt() - (1.0 / af - 1.0).sqrt();
        for v in z.iter_mut() {
            let eps = gain * (*v - af.sqrt() * mu);
            *v = a * *v + b * eps;
        }
    }
    z
}
