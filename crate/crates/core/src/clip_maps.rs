//! Frame-axis clip maps: global dilated sampling, local shifted windows,
//! gather and the weighted scatter that inverts them.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Out-of-range frames repeat the nearest real frame.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl PadSpec {
    pub const NONE: PadSpec = PadSpec { left: 0, right: 0, mode: PadMode::Replicate };
}

/// Index map `F_i` selecting `L` frames from the padded latent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClipMap {
    indices: Vec<usize>,
    path: PathKind,
    clip_id: usize,
    pad: PadSpec,
    source_frames: usize,
    shift: usize,
}

impl ClipMap {
    pub fn new(
        indices: Vec<usize>,
        path: PathKind,
        clip_id: usize,
        pad: PadSpec,
        source_frames: usize,
    ) -> Result<Self> {
        let map = ClipMap { indices, path, clip_id, pad, source_frames, shift: 0 };
        if map.indices.is_empty() || source_frames == 0 {
            return Err(Error::Size("clip map needs at least one index and one source frame".into()));
        }
        if let Some(&bad) = map.indices.iter().find(|&&i| i >= map.padded_len()) {
            return Err(Error::IndexOutOfRange { index: bad, len: map.padded_len() });
        }
        Ok(map)
    }

    fn with_shift(mut self, shift: usize) -> Self {
        self.shift = shift;
        self
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn path(&self) -> PathKind {
        self.path
    }

    pub fn clip_id(&self) -> usize {
        self.clip_id
    }

    pub fn pad(&self) -> PadSpec {
        self.pad
    }

    pub fn source_frames(&self) -> usize {
        self.source_frames
    }

    /// Random temporal shift applied to this window (0 for global maps).
    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn padded_len(&self) -> usize {
        self.source_frames + self.pad.left + self.pad.right
    }

    /// Real frame backing padded index `n`.
    pub fn fold(&self, n: usize) -> usize {
        match self.pad.mode {
            PadMode::Replicate => n.saturating_sub(self.pad.left).min(self.source_frames - 1),
        }
    }

    /// Real frame backing clip position `j`.
    pub fn real_frame(&self, j: usize) -> usize {
        self.fold(self.indices[j])
    }
}

/// `d` dilated clips `F^i(z) = z[i + d*j]`, `j < L`, right-padded by edge
/// replication so every clip has `L` frames. The clips partition the real
/// frames when `d * L >= K`.
pub fn make_global_maps(
    frames: usize,
    clip_len: usize,
    dilation: usize,
    max_padded_len: usize,
) -> Result<Vec<ClipMap>> {
    if frames == 0 || clip_len == 0 || dilation == 0 {
        return Err(Error::Parameter(format!(
            "global maps need K, L, d >= 1 (got K={frames}, L={clip_len}, d={dilation})"
        )));
    }
    let span =
        dilation.checked_mul(clip_len).ok_or_else(|| Error::Config("dilation * clip length overflows".into()))?;
    if span < frames {
        return Err(Error::Config(format!(
            "dilation {dilation} * clip length {clip_len} = {span} cannot cover {frames} frames"
        )));
    }
    let padded = span.max(frames);
    if padded > max_padded_len {
        return Err(Error::Config(format!("padded length {padded} exceeds the configured maximum {max_padded_len}")));
    }
    let pad = PadSpec { left: 0, right: padded - frames, mode: PadMode::Replicate };
    (0..dilation)
        .map(|i| {
            let indices = (0..clip_len).map(|j| i + dilation * j).collect();
            ClipMap::new(indices, PathKind::Global, i, pad, frames)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// One draw per timestep shared by every window.
    #[default]
    Shared,
    /// Independent draw per window per timestep.
    PerClip,
}

/// Per-timestep temporal shifts `s^t` in `[0, stride)`, a pure function of
/// `(seed, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftPlan {
    pub seed: u64,
    pub mode: ShiftMode,
}

impl ShiftPlan {
    pub fn new(seed: u64) -> Self {
        ShiftPlan { seed, mode: ShiftMode::Shared }
    }

    pub fn with_mode(mut self, mode: ShiftMode) -> Self {
        self.mode = mode;
        self
    }

    /// Shared shift for timestep `t`.
    pub fn shift(&self, t: usize, stride: usize) -> usize {
        stream_rng(self.seed, Stream::Shift, t as u64).random_range(0..stride.max(1))
    }

    /// Shifts for `n` windows at timestep `t`.
    pub fn shifts(&self, t: usize, stride: usize, n: usize) -> Vec<usize> {
        match self.mode {
            ShiftMode::Shared => vec![self.shift(t, stride); n],
            ShiftMode::PerClip => {
                let mut rng = stream_rng(self.seed, Stream::Shift, t as u64);
                (0..n).map(|_| rng.random_range(0..stride.max(1))).collect()
            }
        }
    }
}

/// Shifted overlapping windows `F^{i,t}(z) = z[s_i + j]`.
///
/// Base starts `0, stride, 2*stride, .. <= K-L` are offset by the plan's
/// shift and clamped into `[0, K-L]`; starts `0` and `K-L` are always
/// present, duplicates are dropped and any remaining gap wider than `L` is
/// filled so the windows cover every frame.
pub fn make_local_maps(
    frames: usize,
    clip_len: usize,
    stride: usize,
    t: usize,
    plan: &ShiftPlan,
) -> Result<Vec<ClipMap>> {
    if clip_len == 0 || clip_len > frames {
        return Err(Error::Size(format!("clip length {clip_len} must be in [1, {frames}]")));
    }
    if stride == 0 || stride > clip_len {
        return Err(Error::Parameter(format!("stride {stride} must be in [1, {clip_len}]")));
    }
    let last = frames - clip_len;
    let base: Vec<usize> = (0..=last).step_by(stride).collect();
    let shifts = plan.shifts(t, stride, base.len());
    let mut starts: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut push = |start: usize, shift: usize, starts: &mut BTreeSet<(usize, usize)>| {
        if seen.insert(start) {
            starts.insert((start, shift));
        }
    };
    for (b, s) in base.iter().zip(&shifts) {
        push((b + s).min(last), *s, &mut starts);
    }
    push(0, 0, &mut starts);
    push(last, 0, &mut starts);

    // Fill gaps (only possible with per-clip shifts).
    let mut ordered: Vec<(usize, usize)> = starts.into_iter().collect();
    let mut i = 0;
    while i + 1 < ordered.len() {
        let (a, _) = ordered[i];
        let (b, _) = ordered[i + 1];
        if b - a > clip_len {
            ordered.insert(i + 1, (a + clip_len, 0));
        }
        i += 1;
    }

    ordered
        .into_iter()
        .enumerate()
        .map(|(id, (start, shift))| {
            let indices = (start..start + clip_len).collect();
            Ok(ClipMap::new(indices, PathKind::Local, id, PadSpec::NONE, frames)?.with_shift(shift))
        })
        .collect()
}

/// Extracts the clip `padded(z)[indices[j]]`, realizing padding on the fly.
pub fn gather(z: &LatentVideo, map: &ClipMap) -> Result<LatentVideo> {
    if map.source_frames() != z.frames() {
        return Err(Error::shape(map.source_frames(), z.frames()));
    }
    let shape = z.shape().with_frames(map.len());
    let mut data = Vec::with_capacity(shape.len());
    for j in 0..map.len() {
        data.extend_from_slice(z.frame(map.real_frame(j)));
    }
    Ok(LatentVideo::from_raw(shape, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    #[default]
    Uniform,
    Triangular,
}

/// Per-frame clip weights `W_i`, broadcast over channels and pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    values: Vec<f32>,
}

impl WeightProfile {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("weights must be finite and non-negative".into()));
        }
        if !values.iter().any(|&v| v > 0.0) {
            return Err(Error::Parameter("at least one weight must be positive".into()));
        }
        Ok(WeightProfile { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Every weight multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        WeightProfile::new(self.values.iter().map(|v| v * factor).collect())
    }
}

/// Uniform: all ones. Triangular: `w_j = (2 * min(j + 1, L - j) - 1) / L`,
/// a symmetric ramp with endpoints `1/L`.
pub fn clip_weights(clip_len: usize, kind: WeightKind) -> Result<WeightProfile> {
    if clip_len == 0 {
        return Err(Error::Size("clip length must be >= 1".into()));
    }
    let values = match kind {
        WeightKind::Uniform => vec![1.0; clip_len],
        WeightKind::Triangular => {
            (0..clip_len).map(|j| (2 * (j + 1).min(clip_len - j) - 1) as f32 / clip_len as f32).collect()
        }
    };
    WeightProfile::new(values)
}

/// Running numerator and denominator of the per-frame weighted average.
#[derive(Debug, Clone)]
pub struct ClipAccumulator {
    shape: LatentShape,
    num: Vec<f64>,
    den: Vec<f64>,
}

impl ClipAccumulator {
    pub fn new(shape: LatentShape) -> Self {
        ClipAccumulator { shape, num: vec![0.0; shape.len()], den: vec![0.0; shape.frames] }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn numerator(&self) -> &[f64] {
        &self.num
    }

    /// Total weight landed on each real frame.
    pub fn denominator(&self) -> &[f64] {
        &self.den
    }

    /// `num[f] += w_j * clip[j]`, `den[f] += w_j` for every `j -> f`, padded
    /// positions folding onto their source frame.
    pub fn scatter_accumulate(&mut self, clip: &LatentVideo, map: &ClipMap, weights: &WeightProfile) -> Result<()> {
        if map.source_frames() != self.shape.frames {
            return Err(Error::shape(self.shape.frames, map.source_frames()));
        }
        let expected = self.shape.with_frames(map.len());
        if clip.shape() != expected {
            return Err(Error::shape(expected.as_array(), clip.shape().as_array()));
        }
        if weights.len() != map.len() {
            return Err(Error::shape(map.len(), weights.len()));
        }
        let n = self.shape.frame_len();
        for (j, &w) in weights.values().iter().enumerate() {
            let f = map.real_frame(j);
            let w = w as f64;
            self.den[f] += w;
            for (acc, &v) in self.num[f * n..(f + 1) * n].iter_mut().zip(clip.frame(j)) {
                *acc += w * v as f64;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClipAccumulator) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape.as_array(), other.shape.as_array()));
        }
        self.num.iter_mut().zip(&other.num).for_each(|(a, b)| *a += b);
        self.den.iter_mut().zip(&other.den).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `num / den` per frame; fails on the first frame with zero weight.
    pub fn finish(&self) -> Result<LatentVideo> {
        let n = self.shape.frame_len();
        let mut data = Vec::with_capacity(self.shape.len());
        for (f, &d) in self.den.iter().enumerate() {
            if d <= 0.0 {
                return Err(Error::Coverage { frame: f });
            }
            data.extend(self.num[f * n..(f + 1) * n].iter().map(|&v| (v / d) as f32));
        }
        let out = LatentVideo::from_raw(self.shape, data);
        out.ensure_finite("fused latent")?;
        Ok(out)
    }
}
