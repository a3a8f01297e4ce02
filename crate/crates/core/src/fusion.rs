//! Merging denoised clips back into one latent.
//!
//! Each path is solved in closed form as a per-frame weighted average of its
//! clips; the two path solutions are then blended with the annealing
//! coefficient `gamma`. [`brute_force_fuse`] solves the joint weighted
//! least-squares problem over both paths directly and serves as a reference.

use serde::{Deserialize, Serialize};

use crate::clip_maps::{gather, ClipAccumulator, ClipMap, WeightProfile};
use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealParams {
    pub gamma0: f64,
    pub beta: f64,
}

impl Default for AnnealParams {
    fn default() -> Self {
        AnnealParams { gamma0: 0.005, beta: 0.0005 }
    }
}

impl AnnealParams {
    pub fn new(gamma0: f64, beta: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0 <= 1.0) {
            return Err(Error::Parameter(format!("gamma0 must be in (0, 1], got {gamma0}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be >= 0, got {beta}")));
        }
        Ok(AnnealParams { gamma0, beta })
    }
}

/// `gamma = min(gamma0 * exp(beta * t), 1)`.
pub fn annealing_gamma(t: usize, p: &AnnealParams) -> f64 {
    (p.gamma0 * (p.beta * t as f64).exp()).min(1.0)
}

/// Clips produced by one path, with the maps and weights that place them.
#[derive(Debug, Clone, Default)]
pub struct PathBatch {
    pub clips: Vec<LatentVideo>,
    pub maps: Vec<ClipMap>,
    pub weights: Vec<WeightProfile>,
}

impl PathBatch {
    pub fn new(clips: Vec<LatentVideo>, maps: Vec<ClipMap>, weights: Vec<WeightProfile>) -> Result<Self> {
        if clips.len() != maps.len() || clips.len() != weights.len() {
            return Err(Error::shape((clips.len(), clips.len()), (maps.len(), weights.len())));
        }
        Ok(PathBatch { clips, maps, weights })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    fn accumulate(&self, shape: LatentShape) -> Result<ClipAccumulator> {
        let mut acc = ClipAccumulator::new(shape);
        for ((clip, map), w) in self.clips.iter().zip(&self.maps).zip(&self.weights) {
            acc.scatter_accumulate(clip, map, w)?;
        }
        Ok(acc)
    }

    /// Output latent shape implied by the clips and their source length.
    fn target_shape(&self) -> Result<LatentShape> {
        let (clip, map) =
            self.clips.first().zip(self.maps.first()).ok_or_else(|| Error::Size("path has no clips".into()))?;
        Ok(clip.shape().with_frames(map.source_frames()))
    }
}

/// Per-path closed form `sum_i W_i * F_i^{-1}(clip_i) / sum_i W_i`.
pub fn fuse_path(batch: &PathBatch, frames: usize) -> Result<LatentVideo> {
    let shape = batch.target_shape()?;
    if shape.frames != frames {
        return Err(Error::shape(frames, shape.frames));
    }
    batch.accumulate(shape)?.finish()
}

/// Per-frame total weight of a path.
pub fn path_weight_sums(batch: &PathBatch) -> Result<Vec<f64>> {
    let shape = batch.target_shape()?;
    Ok(batch.accumulate(shape)?.denominator().to_vec())
}

/// `sqrt(sum_i ||W_i * (F_i(fused) - clip_i)||^2)`: how much the clips
/// disagree with the merged latent.
pub fn path_residual(fused: &LatentVideo, batch: &PathBatch) -> Result<f64> {
    let mut total = 0.0f64;
    for ((clip, map), w) in batch.clips.iter().zip(&batch.maps).zip(&batch.weights) {
        let projected = gather(fused, map)?;
        projected.ensure_same_shape(clip)?;
        for (j, &wj) in w.values().iter().enumerate() {
            let wj = wj as f64;
            for (a, b) in projected.frame(j).iter().zip(clip.frame(j)) {
                let d = wj * (*a as f64 - *b as f64);
                total += d * d;
            }
        }
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedStep {
    pub latent: LatentVideo,
    pub gamma_used: f64,
    /// `[global, local]` clip disagreement; empty until filled by the caller.
    pub per_path_residuals: Vec<f64>,
}

/// `z = gamma * global + (1 - gamma) * local`, elementwise.
///
/// Where both inputs agree the value is passed through untouched, and the
/// result is clamped into `[min, max]` of the two inputs so rounding never
/// leaves the convex hull.
pub fn glcd_fuse(global: &LatentVideo, local: &LatentVideo, gamma: f64) -> Result<FusedStep> {
    global.ensure_same_shape(local)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let g = gamma as f32;
    let h = (1.0 - gamma) as f32;
    let latent = global.zip_map(local, |a, b| if a == b { a } else { (g * a + h * b).clamp(a.min(b), a.max(b)) })?;
    Ok(FusedStep { latent, gamma_used: gamma, per_path_residuals: Vec::new() })
}

/// Joint minimizer of `sum_k ||W_k (F_k(z) - z_k)||^2` over both paths,
/// with squared norm weights `W_k^2 = gamma * w` on global clips and
/// `(1 - gamma) * w` on local clips. Solved per pixel via the normal
/// equations, i.e. a weighted mean.
pub fn brute_force_fuse(global: &PathBatch, local: &PathBatch, gamma: f64, frames: usize) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let shape = if !global.is_empty() { global.target_shape()? } else { local.target_shape()? };
    if shape.frames != frames {
        return Err(Error::shape(frames, shape.frames));
    }
    let n = shape.frame_len();
    let mut num = vec![0.0f64; shape.len()];
    let mut den = vec![0.0f64; frames];
    for (batch, scale) in [(global, gamma), (local, 1.0 - gamma)] {
        for ((clip, map), w) in batch.clips.iter().zip(&batch.maps).zip(&batch.weights) {
            if map.source_frames() != frames || clip.shape() != shape.with_frames(map.len()) || w.len() != map.len() {
                return Err(Error::shape(shape.with_frames(map.len()).as_array(), clip.shape().as_array()));
            }
            for (j, &wj) in w.values().iter().enumerate() {
                let norm_weight = (scale * wj as f64).sqrt();
                let sq = norm_weight * norm_weight;
                let f = map.real_frame(j);
                den[f] += sq;
                for (acc, &v) in num[f * n..(f + 1) * n].iter_mut().zip(clip.frame(j)) {
                    *acc += sq * v as f64;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(shape.len());
    for (f, &d) in den.iter().enumerate() {
        if d <= 0.0 {
            return Err(Error::Coverage { frame: f });
        }
        data.extend(num[f * n..(f + 1) * n].iter().map(|&v| (v / d) as f32));
    }
    LatentVideo::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip_maps::{clip_weights, PadSpec, PathKind, WeightKind};

    fn shape(k: usize) -> LatentShape {
        LatentShape::new(k, 1, 2, 2).unwrap()
    }

    fn full_map(k: usize, id: usize) -> ClipMap {
        ClipMap::new((0..k).collect(), PathKind::Local, id, PadSpec::NONE, k).unwrap()
    }

    fn uniform(l: usize) -> WeightProfile {
        clip_weights(l, WeightKind::Uniform).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let p = AnnealParams::default();
        assert_eq!(annealing_gamma(0, &p), 0.005);
        assert!((annealing_gamma(1000, &p) - 0.005 * 0.5f64.exp()).abs() < 1e-15);
        assert!((annealing_gamma(1000, &p) - 0.008_243_6).abs() < 1e-7);
        assert_eq!(annealing_gamma(1000, &AnnealParams::new(0.5, 0.01).unwrap()), 1.0);
        assert!(annealing_gamma(10, &p) < annealing_gamma(11, &p));
    }

    #[test]
    fn anneal_params_validated() {
        assert!(AnnealParams::new(0.0, 0.1).is_err());
        assert!(AnnealParams::new(1.5, 0.1).is_err());
        assert!(AnnealParams::new(0.5, -0.1).is_err());
    }

    #[test]
    fn single_identity_clip_passes_through() {
        let z = LatentVideo::from_fn(shape(3), |k, _, y, x| (k * 4 + y * 2 + x) as f32 * 0.37).unwrap();
        let batch = PathBatch::new(vec![z.clone()], vec![full_map(3, 0)], vec![uniform(3)]).unwrap();
        assert_eq!(fuse_path(&batch, 3).unwrap(), z);
    }

    #[test]
    fn two_full_clips_average() {
        let a = LatentVideo::filled(shape(3), 1.0);
        let b = LatentVideo::filled(shape(3), 4.0);
        let batch =
            PathBatch::new(vec![a, b], vec![full_map(3, 0), full_map(3, 1)], vec![uniform(3), uniform(3)]).unwrap();
        assert!(fuse_path(&batch, 3).unwrap().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn disjoint_clips_concatenate() {
        let z = LatentVideo::from_fn(shape(4), |k, _, y, x| (k * 10 + y + x) as f32).unwrap();
        let m0 = ClipMap::new(vec![0, 1], PathKind::Local, 0, PadSpec::NONE, 4).unwrap();
        let m1 = ClipMap::new(vec![2, 3], PathKind::Local, 1, PadSpec::NONE, 4).unwrap();
        let clips = vec![gather(&z, &m0).unwrap(), gather(&z, &m1).unwrap()];
        let batch = PathBatch::new(clips, vec![m0, m1], vec![uniform(2), uniform(2)]).unwrap();
        assert_eq!(fuse_path(&batch, 4).unwrap(), z);
    }

    #[test]
    fn uncovered_frame_is_reported() {
        let m0 = ClipMap::new(vec![0, 1], PathKind::Local, 0, PadSpec::NONE, 4).unwrap();
        let batch = PathBatch::new(vec![LatentVideo::zeros(shape(2))], vec![m0], vec![uniform(2)]).unwrap();
        assert!(matches!(fuse_path(&batch, 4), Err(Error::Coverage { frame: 2 })));
    }

    #[test]
    fn glcd_fuse_examples() {
        let g = LatentVideo::filled(shape(2), 4.0);
        let l = LatentVideo::filled(shape(2), 0.0);
        assert_eq!(glcd_fuse(&g, &l, 0.0).unwrap().latent, l);
        assert_eq!(glcd_fuse(&g, &l, 1.0).unwrap().latent, g);
        assert!(glcd_fuse(&g, &l, 0.25).unwrap().latent.data().iter().all(|&v| v == 1.0));
        assert!(glcd_fuse(&g, &l, 1.5).is_err());
        assert!(glcd_fuse(&g, &LatentVideo::zeros(shape(3)), 0.5).is_err());
    }

    #[test]
    fn brute_force_reduces_to_single_path() {
        let z = LatentVideo::from_fn(shape(4), |k, _, y, x| (k as f32 - 1.5) * (y + 2 * x) as f32).unwrap();
        let m0 = ClipMap::new(vec![0, 1, 2], PathKind::Local, 0, PadSpec::NONE, 4).unwrap();
        let m1 = ClipMap::new(vec![1, 2, 3], PathKind::Local, 1, PadSpec::NONE, 4).unwrap();
        let noisy = z.map(|v| v + 0.5).unwrap();
        let clips = vec![gather(&z, &m0).unwrap(), gather(&noisy, &m1).unwrap()];
        let local = PathBatch::new(clips, vec![m0, m1], vec![uniform(3), uniform(3)]).unwrap();
        let direct = fuse_path(&local, 4).unwrap();
        let joint = brute_force_fuse(&PathBatch::default(), &local, 0.0, 4).unwrap();
        for (a, b) in direct.data().iter().zip(joint.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn brute_force_symmetric_half_is_plain_mean() {
        let a = LatentVideo::filled(shape(2), 1.0);
        let b = LatentVideo::filled(shape(2), 3.0);
        let c = LatentVideo::filled(shape(2), 8.0);
        let mk = |id| full_map(2, id);
        let global = PathBatch::new(vec![a], vec![mk(0)], vec![uniform(2)]).unwrap();
        let local = PathBatch::new(vec![b, c], vec![mk(0), mk(1)], vec![uniform(2), uniform(2)]).unwrap();
        // Two local clips against one global: not symmetric, weights 1:2.
        let z = brute_force_fuse(&global, &local, 0.5, 2).unwrap();
        assert!(z.data().iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }
}
