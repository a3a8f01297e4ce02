//! Randomized oracle and invariant suites, shared by the `check`
//! subcommand and the acceptance tests.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clip_maps::{
    clip_weights, gather, make_global_maps, make_local_maps, ClipAccumulator, ClipMap, ShiftMode, ShiftPlan,
    WeightKind, WeightProfile,
};
use crate::config::{DenoiserKind, PipelineConfig};
use crate::denoiser::{Denoiser, LinearGaussianDenoiser, ZeroDenoiser};
use crate::error::Result;
use crate::fusion::{brute_force_fuse, fuse_path, glcd_fuse, path_weight_sums, PathBatch};
use crate::io::metrics::{compute_metrics, write_metrics_csv, write_report_csv};
use crate::io::npy::encode_npy;
use crate::io::ppm::encode_frames;
use crate::latent::{LatentShape, LatentVideo};
use crate::noise_reinit::{frequency_fuse, make_lpf, FilterKind};
use crate::oracle;
use crate::pipeline::{build_denoiser, build_schedule, plain_ddim, Pipeline};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::schedule::{alpha_schedule, DenoisePrediction, DenoiseSchedule};
use crate::spectral::{Direction, FftNd};
use crate::vmcr::{backtracking_step, motion_loss_at, motion_loss_grad, VmcrParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<12} {} ({:.2}s)", self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

fn outcome(name: &'static str, started: Instant, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { name, passed, detail, elapsed: started.elapsed() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Denoiser, 0xC4EC)
}

fn noise(shape: LatentShape, r: &mut ChaCha8Rng) -> LatentVideo {
    standard_normal(shape, r)
}

/// Suite names accepted by [`run_suites`].
pub const SUITES: [&str; 9] =
    ["fusion", "gradient", "descent", "spectral", "coverage", "determinism", "degenerate", "convergence", "defaults"];

/// Runs every suite whose name contains `filter` (all when `None`).
pub fn run_suites(filter: Option<&str>, seed: u64) -> Vec<CheckOutcome> {
    SUITES
        .iter()
        .filter(|name| filter.is_none_or(|f| name.contains(f)))
        .map(|name| match *name {
            "fusion" => fusion_oracle(50, seed),
            "gradient" => vmcr_gradient(20, seed),
            "descent" => vmcr_descent(100, seed),
            "spectral" => spectral(seed),
            "coverage" => coverage(1000, seed),
            "determinism" => determinism(seed),
            "degenerate" => degenerate(&[5, 50], seed),
            "convergence" => convergence(20),
            "defaults" => defaults(),
            _ => unreachable!(),
        })
        .collect()
}

fn random_weights(len: usize, r: &mut ChaCha8Rng) -> Result<WeightProfile> {
    match r.random_range(0..3) {
        0 => clip_weights(len, WeightKind::Uniform),
        1 => clip_weights(len, WeightKind::Triangular),
        _ => WeightProfile::new((0..len).map(|_| r.random_range(0.05f32..2.0)).collect()),
    }
}

fn random_batch(z: &LatentVideo, maps: Vec<ClipMap>, r: &mut ChaCha8Rng) -> Result<PathBatch> {
    let mut clips = Vec::with_capacity(maps.len());
    let mut weights = Vec::with_capacity(maps.len());
    for m in &maps {
        // Clips disagree with each other: the true frames plus clip noise.
        let base = gather(z, m)?;
        let jitter = noise(base.shape(), r);
        clips.push(base.zip_map(&jitter, |a, b| a + 0.5 * b)?);
        weights.push(random_weights(m.len(), r)?);
    }
    PathBatch::new(clips, maps, weights)
}

/// Joint fusion against the dense least-squares oracle, and the blended
/// path solutions against it wherever both paths carry equal weight.
pub fn fusion_oracle(instances: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let mut r = rng(seed);
        let gammas = [0.0, 0.005, 0.5, 1.0];
        let (mut worst, mut worst_eq9, mut qualifying) = (0.0f64, 0.0f64, 0usize);
        for i in 0..instances {
            let frames: usize = r.random_range(2..=32);
            let clip_len = r.random_range(1..=8.min(frames));
            let shape = LatentShape::new(frames, r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3))?;
            let z = noise(shape, &mut r);
            let dilation = frames.div_ceil(clip_len) + r.random_range(0..=1);
            let global = random_batch(&z, make_global_maps(frames, clip_len, dilation, dilation * clip_len)?, &mut r)?;
            let stride = r.random_range(1..=clip_len);
            let plan =
                ShiftPlan::new(r.random()).with_mode(if r.random() { ShiftMode::Shared } else { ShiftMode::PerClip });
            let local =
                random_batch(&z, make_local_maps(frames, clip_len, stride, r.random_range(0..1000), &plan)?, &mut r)?;
            let gamma = gammas[i % gammas.len()];

            let oracle = oracle::dense_lsq_fuse(&global, &local, gamma, frames)?;
            let brute = brute_force_fuse(&global, &local, gamma, frames)?;
            let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let floor = 1e-3 * scale.max(1e-12);
            for (a, b) in brute.data().iter().zip(&oracle) {
                worst = worst.max((*a as f64 - b).abs() / b.abs().max(floor));
            }

            let eq9 = glcd_fuse(&fuse_path(&global, frames)?, &fuse_path(&local, frames)?, gamma)?.latent;
            let (sg, sl) = (path_weight_sums(&global)?, path_weight_sums(&local)?);
            let n = shape.frame_len();
            for f in 0..frames {
                if (sg[f] - sl[f]).abs() > 1e-9 * sg[f].max(sl[f]) {
                    continue;
                }
                qualifying += n;
                for p in f * n..(f + 1) * n {
                    let b = oracle[p];
                    worst_eq9 = worst_eq9.max((eq9.data()[p] as f64 - b).abs() / b.abs().max(floor));
                }
            }
        }
        let secs = started.elapsed().as_secs_f64();
        let passed = worst <= 1e-5 && worst_eq9 <= 1e-5 && qualifying > 0 && secs < 30.0;
        Ok((
            passed,
            format!(
                "{instances} instances: joint rel err {worst:.2e}, blended rel err {worst_eq9:.2e} over {qualifying} equal-weight pixels (tol 1e-5)"
            ),
        ))
    })();
    outcome("fusion", started, result)
}

fn linear_schedule() -> Result<DenoiseSchedule> {
    alpha_schedule(1000, 0.00085, 0.012)
}

struct MotionInstance {
    z: LatentVideo,
    pred: DenoisePrediction,
    t: usize,
    ab: f64,
}

fn motion_instance(r: &mut ChaCha8Rng, sched: &DenoiseSchedule, max: [usize; 3]) -> Result<MotionInstance> {
    let frames = r.random_range(3..=max[0]);
    let channels = r.random_range(1..=max[1]);
    let side = r.random_range(2..=max[2]);
    let shape = LatentShape::new(frames, channels, side, side)?;
    let t = r.random_range(1..=sched.train_steps());
    let z = noise(shape, r);
    let eps = noise(shape, r);
    Ok(MotionInstance { z, pred: DenoisePrediction::new(eps, t), t, ab: sched.alpha_bar(t)? })
}

/// Analytic motion-loss gradient against central differences of the `f64`
/// reference loss. Draws whose difference stencil straddles a kink of the
/// loss (an absolute value or phase wrap) are redrawn, since finite
/// differences are meaningless there.
pub fn vmcr_gradient(instances: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let sched = linear_schedule()?;
        let p = VmcrParams::default();
        let h = 1e-3;
        let mut r = rng(seed ^ 0x6AD);
        let (mut worst, mut worst_loss, mut redrawn) = (0.0f64, 0.0f64, 0usize);
        let mut done = 0;
        while done < instances {
            let inst = motion_instance(&mut r, &sched, [6, 2, 8])?;
            let z = inst.z.to_f64();
            let eps = inst.pred.eps.to_f64();
            let shape = inst.z.shape();
            if !oracle::stencil_is_smooth(&z, &eps, shape, inst.ab, h, &p) {
                redrawn += 1;
                if redrawn > 50 * instances {
                    return Ok((false, format!("could not draw smooth instances ({redrawn} rejected)")));
                }
                continue;
            }
            let loss = |x: &[f64]| oracle::motion_loss_ref(x, &eps, shape, inst.ab, &p);
            let reference = loss(&z);
            let production = motion_loss_at(&inst.z, &inst.pred, inst.t, &sched, &p)?.total;
            worst_loss = worst_loss.max((production - reference).abs() / reference.abs().max(1e-12));
            let numeric = oracle::central_difference(loss, &z, h);
            let analytic: Vec<f64> =
                motion_loss_grad(&inst.z, &inst.pred, inst.t, &sched, &p)?.data().iter().map(|&v| v as f64).collect();
            worst = worst.max(oracle::normwise_relative_error(&analytic, &numeric));
            done += 1;
        }
        let secs = started.elapsed().as_secs_f64();
        Ok((
            worst < 1e-3 && worst_loss < 1e-9 && secs < 60.0,
            format!(
                "{instances} instances (h={h}, {redrawn} non-smooth draws redrawn): grad rel err {worst:.2e} (tol 1e-3), loss rel err {worst_loss:.2e}"
            ),
        ))
    })();
    outcome("gradient", started, result)
}

/// One backtracked refinement step from `omega0 = omega * ||z||_inf`
/// strictly lowers the motion loss.
pub fn vmcr_descent(instances: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let sched = linear_schedule()?;
        let p = VmcrParams::default();
        let mut r = rng(seed ^ 0xDE5C);
        let (mut decreased, mut max_halvings) = (0usize, 0usize);
        for _ in 0..instances {
            let inst = motion_instance(&mut r, &sched, [8, 4, 8])?;
            let omega0 = p.omega_motion * inst.z.max_abs() as f64;
            let step = backtracking_step(&inst.z, &inst.pred, inst.t, &sched, &p, omega0, 20)?;
            if step.decreased() {
                decreased += 1;
                max_halvings = max_halvings.max(step.halvings);
            }
        }
        Ok((
            decreased == instances,
            format!("{decreased}/{instances} steps decreased the loss, at most {max_halvings} halvings"),
        ))
    })();
    outcome("descent", started, result)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

/// FFT round trip, frequency-fusion identities and the per-bin spectral
/// split against a direct DFT.
pub fn spectral(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let mut r = rng(seed ^ 0x5BEC);
        let mut notes = Vec::new();
        let mut passed = true;

        let big = LatentShape::new(16, 4, 16, 16)?;
        let x = noise(big, &mut r);
        let fft = FftNd::new(&[16, 16, 16]);
        let mut roundtrip = 0.0f64;
        for c in 0..4 {
            let vol = oracle::channel_volume(&x, c);
            let mut buf = fft.forward_real(&vol);
            fft.process(&mut buf, Direction::Inverse, true);
            roundtrip =
                roundtrip.max(buf.iter().zip(&vol).map(|(a, b)| (a.re - b).abs().max(a.im.abs())).fold(0.0, f64::max));
        }
        passed &= roundtrip <= 1e-5;
        notes.push(format!("round trip {roundtrip:.1e}"));

        let shape = LatentShape::new(8, 2, 6, 8)?;
        let dims = [8, 6, 8];
        let (z, eta) = (noise(shape, &mut r), noise(shape, &mut r));
        let mut identity = 0.0f64;
        identity = identity
            .max(max_abs_diff(frequency_fuse(&z, &eta, &make_lpf(dims, FilterKind::AllPass, 0.25)?)?.data(), z.data()));
        identity = identity.max(max_abs_diff(
            frequency_fuse(&z, &eta, &make_lpf(dims, FilterKind::AllStop, 0.25)?)?.data(),
            eta.data(),
        ));
        for kind in [FilterKind::Gaussian, FilterKind::IdealBox] {
            let filter = make_lpf(dims, kind, r.random_range(0.05..=0.5))?;
            identity = identity.max(max_abs_diff(frequency_fuse(&z, &z, &filter)?.data(), z.data()));
        }
        passed &= identity <= 1e-5;
        notes.push(format!("identities {identity:.1e}"));

        let mut split = 0.0f64;
        for kind in [FilterKind::Gaussian, FilterKind::IdealBox] {
            let filter = make_lpf(dims, kind, r.random_range(0.05..=0.5))?;
            let fused = frequency_fuse(&z, &eta, &filter)?;
            for c in 0..shape.channels {
                let got = oracle::dft_real(&oracle::channel_volume(&fused, c), &dims);
                let zs = oracle::dft_real(&oracle::channel_volume(&z, c), &dims);
                let es = oracle::dft_real(&oracle::channel_volume(&eta, c), &dims);
                let expect: Vec<_> =
                    zs.iter().zip(&es).zip(filter.mask()).map(|((a, b), &h)| a * h + b * (1.0 - h)).collect();
                let scale = expect.iter().map(|v| v.norm()).fold(0.0, f64::max);
                let err = got.iter().zip(&expect).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                split = split.max(err / scale);
            }
        }
        passed &= split <= 1e-5;
        notes.push(format!("per-bin split rel {split:.1e}"));
        Ok((passed, format!("{} (tol 1e-5)", notes.join(", "))))
    })();
    outcome("spectral", started, result)
}

/// Every frame is covered by exactly one global clip and at least one
/// local clip.
pub fn coverage(tuples: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let mut r = rng(seed ^ 0xC0DE);
        for i in 0..tuples {
            let frames: usize = r.random_range(1..=64);
            let clip_len = r.random_range(1..=frames);
            let stride = r.random_range(1..=clip_len);
            let t = r.random_range(0..=1000);
            let mode = if i % 2 == 0 { ShiftMode::Shared } else { ShiftMode::PerClip };
            let plan = ShiftPlan::new(r.random()).with_mode(mode);
            let dilation = frames.div_ceil(clip_len);
            let shape = LatentShape::new(frames, 1, 1, 1)?;
            let ones = |len: usize| clip_weights(len, WeightKind::Uniform);
            let count = |maps: &[ClipMap]| -> Result<Vec<f64>> {
                let mut acc = ClipAccumulator::new(shape);
                for m in maps {
                    acc.scatter_accumulate(&LatentVideo::zeros(shape.with_frames(m.len())), m, &ones(m.len())?)?;
                }
                Ok(acc.denominator().to_vec())
            };
            let global = count(&make_global_maps(frames, clip_len, dilation, dilation * clip_len)?)?;
            let local = count(&make_local_maps(frames, clip_len, stride, t, &plan)?)?;
            // Padded global positions fold onto the last frame; count only
            // real positions for the exact-once rule.
            let global_real = make_global_maps(frames, clip_len, dilation, dilation * clip_len)?
                .iter()
                .flat_map(|m| m.indices().to_vec())
                .filter(|&i| i < frames)
                .fold(vec![0usize; frames], |mut v, i| {
                    v[i] += 1;
                    v
                });
            if let Some(f) = global_real.iter().position(|&c| c != 1) {
                return Ok((
                    false,
                    format!("tuple {i} (K={frames}, L={clip_len}): frame {f} in {} global clips", global_real[f]),
                ));
            }
            if let Some(f) = (0..frames).find(|&f| global[f] < 1.0 || local[f] < 1.0) {
                return Ok((
                    false,
                    format!("tuple {i} (K={frames}, L={clip_len}, stride={stride}): frame {f} uncovered"),
                ));
            }
        }
        Ok((true, format!("{tuples} random (K, L, stride, seed, t) tuples fully covered")))
    })();
    outcome("coverage", started, result)
}

/// A small configuration with every mechanism switched on.
pub fn feature_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.video.frames = 12;
    cfg.video.clip_len = 4;
    cfg.video.channels = 3;
    cfg.video.height = 4;
    cfg.video.width = 5;
    cfg.schedule.steps = 6;
    cfg.denoiser.name = DenoiserKind::ToyAttention;
    cfg.run.seed = seed;
    cfg
}

/// Every artifact of a run, serialized in memory.
pub fn run_artifacts(cfg: &PipelineConfig) -> Result<Vec<Vec<u8>>> {
    let pipeline = Pipeline::new(cfg.clone())?;
    let denoiser = build_denoiser(cfg, pipeline.schedule().clone())?;
    let result = pipeline.run(denoiser.as_ref()).map_err(|f| f.error)?;
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &compute_metrics(&result.z0))?;
    let mut report = Vec::new();
    write_report_csv(&mut report, &result.reports)?;
    let mut out = vec![encode_npy(&result.z0), metrics, report];
    out.extend(encode_frames(&result.z0, cfg.run.normalize));
    Ok(out)
}

/// Two identically seeded runs give byte-identical artifacts.
pub fn determinism(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let mut cfg = feature_config(seed);
        let a = run_artifacts(&cfg)?;
        let b = run_artifacts(&cfg)?;
        cfg.run.parallel = true;
        let c = run_artifacts(&cfg)?;
        let same = a == b && a == c;
        Ok((
            same,
            format!(
                "{} artifacts (npy, 2 csv, {} ppm) identical across serial and parallel runs: {same}",
                a.len(),
                a.len() - 3
            ),
        ))
    })();
    outcome("determinism", started, result)
}

/// Configuration under which the pipeline reduces to single-clip DDIM.
pub fn degenerate_config(frames: usize, steps: usize, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.video.frames = frames;
    cfg.video.clip_len = frames;
    cfg.schedule.steps = steps;
    cfg.glcd.dilation = Some(1);
    cfg.noise.shuffle = false;
    cfg.noise.frequency_fusion = false;
    cfg.vmcr.enabled = false;
    cfg.abam.enabled = false;
    cfg.run.seed = seed;
    cfg
}

pub fn degenerate(steps: &[usize], seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let mut cases = 0;
        for &t in steps {
            let cfg = degenerate_config(8, t, seed);
            let pipeline = Pipeline::new(cfg.clone())?;
            let sched = pipeline.schedule().clone();
            let denoisers: Vec<Box<dyn Denoiser>> =
                vec![Box::new(ZeroDenoiser), Box::new(LinearGaussianDenoiser::new(0.5, 0.8, sched.clone())?)];
            for d in &denoisers {
                let out = pipeline.run(d.as_ref()).map_err(|f| f.error)?.z0;
                let reference = plain_ddim(pipeline.shape(), seed, &sched, d.as_ref())?;
                let bitwise = out.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                if !bitwise {
                    return Ok((false, format!("T={t}, {}: differs from plain DDIM", d.name())));
                }
                cases += 1;
            }
        }
        Ok((true, format!("{cases} runs (T in {steps:?}, zero and linear_gaussian) bitwise equal to plain DDIM")))
    })();
    outcome("degenerate", started, result)
}

/// Mean over seeds and frames of the per-frame RMS distance of the final
/// latent to `mu`.
pub fn gaussian_distance(steps: usize, seeds: usize, mu: f64, sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for seed in 0..seeds as u64 {
        let mut cfg = PipelineConfig::default();
        cfg.video.frames = 24;
        cfg.video.clip_len = 8;
        cfg.schedule.steps = steps;
        cfg.denoiser.name = DenoiserKind::LinearGaussian;
        cfg.denoiser.mu = mu;
        cfg.denoiser.sigma = sigma;
        cfg.run.seed = seed;
        let sched = Arc::new(build_schedule(&cfg)?);
        let pipeline = Pipeline::with_schedule(cfg.clone(), sched.clone())?;
        let d = build_denoiser(&cfg, sched)?;
        let z0 = pipeline.run(d.as_ref()).map_err(|f| f.error)?.z0;
        let n = z0.shape().frame_len() as f64;
        let per_frame: f64 = (0..z0.frames())
            .map(|k| (z0.frame(k).iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n).sqrt())
            .sum::<f64>()
            / z0.frames() as f64;
        total += per_frame;
    }
    Ok(total / seeds as f64)
}

/// With the exact Gaussian posterior denoiser the final latent approaches
/// `mu`, and more steps bring it closer.
pub fn convergence(seeds: usize) -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let (mu, sigma) = (0.5, 1.0);
        let d: Vec<f64> = [5, 10, 50].iter().map(|&t| gaussian_distance(t, seeds, mu, sigma)).collect::<Result<_>>()?;
        let decreasing = d[0] > d[1] && d[1] > d[2];
        let secs = started.elapsed().as_secs_f64();
        Ok((
            decreasing && d[2] < 0.15 && secs < 120.0,
            format!(
                "mean per-frame RMS to mu over {seeds} seeds: T=5 {:.4}, T=10 {:.4}, T=50 {:.4} (need decreasing, T=50 < 0.15)",
                d[0], d[1], d[2]
            ),
        ))
    })();
    outcome("convergence", started, result)
}

/// An empty configuration resolves to the published hyperparameters.
pub fn defaults() -> CheckOutcome {
    let started = Instant::now();
    let result = (|| {
        let cfg = PipelineConfig::from_toml_str("")?;
        let got = [
            ("gamma0", cfg.glcd.gamma0, 0.005),
            ("beta", cfg.glcd.beta, 0.0005),
            ("lambda", cfg.abam.lambda, 0.1),
            ("lambda_f", cfg.vmcr.lambda_f, 0.2),
            ("lambda_mse", cfg.vmcr.lambda_mse, 0.001),
            ("lambda_phase", cfg.vmcr.lambda_phase, 1.0),
            ("omega_motion", cfg.vmcr.omega_motion, 2e-5),
        ];
        let wrong: Vec<String> =
            got.iter().filter(|(_, a, b)| a != b).map(|(k, a, b)| format!("{k}={a} (want {b})")).collect();
        Ok((
            wrong.is_empty(),
            if wrong.is_empty() { "empty config resolves to the published defaults".into() } else { wrong.join(", ") },
        ))
    })();
    outcome("defaults", started, result)
}
