//! Anchor-based key/value blending and a single-head frame attention block
//! that exercises it end to end.
//!
//! Tokens are clip frames; a frame's embedding is its per-channel mean over
//! the spatial plane. Anchor keys and values are kept per frame position and
//! blended position-wise.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use super::{DenoiseRequest, Denoiser, DenoiserCapabilities};
use crate::clip_maps::PathKind;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::rng::{stream_rng, Stream};
use crate::schedule::{DenoisePrediction, DenoiseSchedule};

/// Dense row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl AttnMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(rows * cols, data.len()));
        }
        Ok(AttnMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn same_shape(&self, other: &AttnMatrix) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape((self.rows, self.cols), (other.rows, other.cols)));
        }
        Ok(())
    }

    /// `self * w` for a `cols x out` weight matrix.
    fn matmul(&self, w: &[f32], out: usize) -> AttnMatrix {
        let mut data = vec![0.0f32; self.rows * out];
        for r in 0..self.rows {
            for (i, &x) in self.row(r).iter().enumerate() {
                for o in 0..out {
                    data[r * out + o] += x * w[i * out + o];
                }
            }
        }
        AttnMatrix { rows: self.rows, cols: out, data }
    }
}

/// Keys and values captured from the anchor clip, plus the blend weight
/// `lambda` kept on the clip's own keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorKV {
    pub keys: AttnMatrix,
    pub values: AttnMatrix,
    pub lambda: f32,
}

impl AnchorKV {
    pub fn new(keys: AttnMatrix, values: AttnMatrix, lambda: f32) -> Result<Self> {
        keys.same_shape(&values)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("anchor lambda must be in [0, 1], got {lambda}")));
        }
        Ok(AnchorKV { keys, values, lambda })
    }
}

/// `K = lambda * K_orig + (1 - lambda) * K_anchor`, and likewise for `V`.
pub fn blend_anchor_kv(keys: &AttnMatrix, values: &AttnMatrix, anchor: &AnchorKV) -> Result<(AttnMatrix, AttnMatrix)> {
    keys.same_shape(&anchor.keys)?;
    values.same_shape(&anchor.values)?;
    let l = anchor.lambda;
    let blend = |orig: &AttnMatrix, anc: &AttnMatrix| AttnMatrix {
        rows: orig.rows,
        cols: orig.cols,
        data: orig.data.iter().zip(&anc.data).map(|(&o, &a)| l * o + (1.0 - l) * a).collect(),
    };
    Ok((blend(keys, &anchor.keys), blend(values, &anchor.values)))
}

/// Projection weights of the toy attention block, each `C x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionParams {
    pub channels: usize,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
}

impl ToyAttentionParams {
    /// Weights drawn from `N(0, 1/C)` with the given seed.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Weights, 0);
        let scale = 1.0 / (channels as f32).sqrt();
        let mut draw = || {
            (0..channels * channels)
                .map(|_| scale * Distribution::<f32>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f32>>()
        };
        let (wq, wk, wv) = (draw(), draw(), draw());
        ToyAttentionParams { channels, wq, wk, wv }
    }
}

/// Per-frame mean over the spatial plane: an `L x C` token matrix.
pub fn frame_embeddings(clip: &LatentVideo) -> AttnMatrix {
    let s = clip.shape();
    let plane = s.plane_len();
    let mut data = Vec::with_capacity(s.frames * s.channels);
    for k in 0..s.frames {
        let frame = clip.frame(k);
        for c in 0..s.channels {
            let sum: f32 = frame[c * plane..(c + 1) * plane].iter().sum();
            data.push(sum / plane as f32);
        }
    }
    AttnMatrix { rows: s.frames, cols: s.channels, data }
}

fn check_channels(clip: &LatentVideo, params: &ToyAttentionParams) -> Result<()> {
    if clip.shape().channels != params.channels {
        return Err(Error::shape(params.channels, clip.shape().channels));
    }
    Ok(())
}

/// `(Q, K, V)` projections of the clip's frame tokens.
pub fn project_qkv(clip: &LatentVideo, params: &ToyAttentionParams) -> Result<(AttnMatrix, AttnMatrix, AttnMatrix)> {
    check_channels(clip, params)?;
    let e = frame_embeddings(clip);
    let c = params.channels;
    Ok((e.matmul(&params.wq, c), e.matmul(&params.wk, c), e.matmul(&params.wv, c)))
}

/// Row-wise `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights(q: &AttnMatrix, k: &AttnMatrix) -> Result<AttnMatrix> {
    if q.cols != k.cols {
        return Err(Error::shape(q.cols, k.cols));
    }
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut data = Vec::with_capacity(q.rows * k.rows);
    for i in 0..q.rows {
        let logits: Vec<f32> =
            (0..k.rows).map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f32>() * scale).collect();
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    AttnMatrix::new(q.rows, k.rows, data)
}

/// Attention over frames with optional anchor blending, residual-added to
/// every pixel of the corresponding frame and channel.
pub fn toy_attention_forward(
    clip: &LatentVideo,
    params: &ToyAttentionParams,
    anchor: Option<&AnchorKV>,
) -> Result<LatentVideo> {
    let (q, k, v) = project_qkv(clip, params)?;
    let (k, v) = match anchor {
        Some(a) => blend_anchor_kv(&k, &v, a)?,
        None => (k, v),
    };
    let w = attention_weights(&q, &k)?;
    let s = clip.shape();
    let plane = s.plane_len();
    let mut out = clip.data().to_vec();
    for f in 0..s.frames {
        for c in 0..s.channels {
            let o: f32 = (0..k.rows).map(|m| w.row(f)[m] * v.row(m)[c]).sum();
            let start = (f * s.channels + c) * plane;
            out[start..start + plane].iter_mut().for_each(|x| *x += o);
        }
    }
    LatentVideo::new(s, out)
}

/// Noise prediction `sqrt(1 - ab_t) * attention(z)`: the unit-variance
/// Gaussian posterior applied to attention-mixed frames.
#[derive(Debug, Clone)]
pub struct ToyAttentionDenoiser {
    params: ToyAttentionParams,
    schedule: Arc<DenoiseSchedule>,
}

impl ToyAttentionDenoiser {
    pub fn new(params: ToyAttentionParams, schedule: Arc<DenoiseSchedule>) -> Self {
        ToyAttentionDenoiser { params, schedule }
    }

    pub fn params(&self) -> &ToyAttentionParams {
        &self.params
    }
}

impl Denoiser for ToyAttentionDenoiser {
    fn name(&self) -> &str {
        "toy_attention"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: true }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        let ab = self.schedule.alpha_bar(req.t).map_err(|e| req.error(e.to_string()))?;
        let mixed = toy_attention_forward(&req.clip, &self.params, req.anchor_kv.as_deref())
            .map_err(|e| req.error(e.to_string()))?;
        let gain = (1.0 - ab).sqrt() as f32;
        let eps = mixed.map(|v| gain * v).map_err(|e| req.error(e.to_string()))?;
        Ok(DenoisePrediction::new(eps, req.t))
    }

    fn attention_kv(&self, req: &DenoiseRequest) -> Result<Option<(AttnMatrix, AttnMatrix)>> {
        let (_, k, v) = project_qkv(&req.clip, &self.params).map_err(|e| req.error(e.to_string()))?;
        Ok(Some((k, v)))
    }
}

/// Records the anchor clip's keys and values.
pub fn capture_anchor(denoiser: &dyn Denoiser, first_clip: &DenoiseRequest, lambda: f32) -> Result<AnchorKV> {
    match denoiser.attention_kv(first_clip)? {
        Some((k, v)) => AnchorKV::new(k, v, lambda),
        None => Err(Error::Ordering(format!("denoiser `{}` does not expose attention", denoiser.name()))),
    }
}

/// Holds the anchor for one `(timestep, path)`; capturing for a new
/// timestep drops the previous anchor.
#[derive(Debug, Default)]
pub struct AnchorSlot {
    current: Option<(usize, PathKind, Arc<AnchorKV>)>,
}

impl AnchorSlot {
    pub fn new() -> Self {
        AnchorSlot::default()
    }

    pub fn capture(&mut self, t: usize, path: PathKind, anchor: AnchorKV) -> Arc<AnchorKV> {
        let anchor = Arc::new(anchor);
        self.current = Some((t, path, anchor.clone()));
        anchor
    }

    pub fn get(&self, t: usize, path: PathKind) -> Result<Arc<AnchorKV>> {
        match &self.current {
            Some((ct, cp, a)) if *ct == t && *cp == path => Ok(a.clone()),
            Some((ct, cp, _)) => {
                Err(Error::Ordering(format!("anchor requested for t={t} {path:?} but slot holds t={ct} {cp:?}")))
            }
            None => Err(Error::Ordering(format!("anchor requested for t={t} {path:?} before capture"))),
        }
    }

    pub fn timestep(&self) -> Option<usize> {
        self.current.as_ref().map(|(t, _, _)| *t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use crate::rng::standard_normal;

    fn mat(rows: usize, cols: usize, v: f32) -> AttnMatrix {
        AttnMatrix::new(rows, cols, vec![v; rows * cols]).unwrap()
    }

    fn clip(frames: usize, seed: u64) -> LatentVideo {
        standard_normal(LatentShape::new(frames, 3, 2, 2).unwrap(), &mut stream_rng(seed, Stream::Denoiser, 0))
    }

    #[test]
    fn blend_examples() {
        let (ko, vo) = (mat(2, 3, 1.0), mat(2, 3, 2.0));
        let (ka, va) = (mat(2, 3, 0.0), mat(2, 3, 5.0));
        let at = |l| AnchorKV::new(ka.clone(), va.clone(), l).unwrap();
        assert_eq!(blend_anchor_kv(&ko, &vo, &at(1.0)).unwrap(), (ko.clone(), vo.clone()));
        assert_eq!(blend_anchor_kv(&ko, &vo, &at(0.0)).unwrap(), (ka.clone(), va.clone()));
        let (k, _) = blend_anchor_kv(&ko, &vo, &at(0.1)).unwrap();
        assert!(k.data.iter().all(|&x| x == 0.1));
        assert!(blend_anchor_kv(&mat(3, 3, 0.0), &vo, &at(0.5)).is_err());
        assert!(AnchorKV::new(ka, va, 1.5).is_err());
    }

    #[test]
    fn blend_is_affine_in_lambda() {
        let ko = AttnMatrix::new(2, 2, vec![0.3, -1.7, 2.2, 0.01]).unwrap();
        let ka = AttnMatrix::new(2, 2, vec![1.1, 0.4, -0.9, 3.3]).unwrap();
        let run = |l| blend_anchor_kv(&ko, &ko, &AnchorKV::new(ka.clone(), ka.clone(), l).unwrap()).unwrap().0;
        let (lo, hi, mid) = (run(0.0), run(1.0), run(0.5));
        for i in 0..4 {
            assert_eq!(mid.data[i], 0.5 * (lo.data[i] + hi.data[i]));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = ToyAttentionParams::seeded(3, 1);
        let (q, k, _) = project_qkv(&clip(6, 2), &params).unwrap();
        let w = attention_weights(&q, &k).unwrap();
        for r in 0..w.rows {
            assert!((w.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_frame_adds_value_projection() {
        let params = ToyAttentionParams::seeded(3, 4);
        let z = clip(1, 5);
        let out = toy_attention_forward(&z, &params, None).unwrap();
        let (_, _, v) = project_qkv(&z, &params).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                let i = c * 4 + p;
                assert!((out.data()[i] - (z.data()[i] + v.data[c])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn own_anchor_matches_plain_attention() {
        let params = ToyAttentionParams::seeded(3, 6);
        let z = clip(4, 7);
        let (_, k, v) = project_qkv(&z, &params).unwrap();
        let plain = toy_attention_forward(&z, &params, None).unwrap();
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let anchor = AnchorKV::new(k.clone(), v.clone(), lambda).unwrap();
            let with = toy_attention_forward(&z, &params, Some(&anchor)).unwrap();
            for (a, b) in plain.data().iter().zip(with.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anchor_slot_lifecycle() {
        let mut slot = AnchorSlot::new();
        assert!(matches!(slot.get(10, PathKind::Local), Err(Error::Ordering(_))));
        let a = AnchorKV::new(mat(2, 2, 1.0), mat(2, 2, 1.0), 0.1).unwrap();
        slot.capture(10, PathKind::Local, a.clone());
        assert_eq!(*slot.get(10, PathKind::Local).unwrap(), a);
        assert!(slot.get(10, PathKind::Global).is_err());
        let b = AnchorKV::new(mat(2, 2, 2.0), mat(2, 2, 2.0), 0.1).unwrap();
        slot.capture(9, PathKind::Local, b.clone());
        assert!(slot.get(10, PathKind::Local).is_err());
        assert_eq!(*slot.get(9, PathKind::Local).unwrap(), b);
    }

    #[test]
    fn capture_requires_attention() {
        let req = DenoiseRequest::new(clip(2, 1), 3);
        assert!(matches!(capture_anchor(&super::super::ZeroDenoiser, &req, 0.1), Err(Error::Ordering(_))));
    }
}
