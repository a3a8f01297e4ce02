//! Initial latent construction: tile-and-shuffle a short noise unit along
//! the frame axis, then keep its low frequencies and take the high
//! frequencies from fresh Gaussian noise.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::spectral::{normalized_frequency, Direction, FftNd};

/// Largest imaginary part tolerated after the inverse transform.
pub const IMAG_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    #[default]
    Gaussian,
    #[serde(rename = "box")]
    IdealBox,
    AllPass,
    AllStop,
}

/// Low-pass mask over the `(K, H, W)` FFT bins, shared by every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFilter {
    dims: [usize; 3],
    mask: Vec<f64>,
    kind: Option<FilterKind>,
    cutoff: f64,
}

impl FrequencyFilter {
    /// Wraps an arbitrary mask. Values must lie in `[0, 1]`; conjugate
    /// symmetry is not enforced here and surfaces as a residue error in
    /// [`frequency_fuse`] when violated.
    pub fn from_mask(dims: [usize; 3], mask: Vec<f64>) -> Result<Self> {
        if mask.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(dims, mask.len()));
        }
        if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("filter values must lie in [0, 1]".into()));
        }
        Ok(FrequencyFilter { dims, mask, kind: None, cutoff: f64::NAN })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn kind(&self) -> Option<FilterKind> {
        self.kind
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> f64 {
        self.mask[(t * self.dims[1] + y) * self.dims[2] + x]
    }

    /// `H(f) == H(-f)` on every bin.
    pub fn is_conjugate_symmetric(&self) -> bool {
        let [kt, kh, kw] = self.dims;
        (0..kt).all(|t| {
            (0..kh).all(|y| (0..kw).all(|x| self.at(t, y, x) == self.at((kt - t) % kt, (kh - y) % kh, (kw - x) % kw)))
        })
    }

    /// Mask as a `(K, H, W)` float32 latent-like block for NPY export.
    pub fn to_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&v| v as f32).collect()
    }
}

/// Builds a spatio-temporal low-pass mask. With `f` the signed normalized
/// frequency per axis: Gaussian `exp(-|f|^2 / (2 c^2))`, box
/// `max|f_axis| <= c`, all-pass 1, all-stop 0.
pub fn make_lpf(dims: [usize; 3], kind: FilterKind, cutoff: f64) -> Result<FrequencyFilter> {
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        return Err(Error::Parameter(format!("cutoff must be in (0, 0.5], got {cutoff}")));
    }
    if dims.contains(&0) {
        return Err(Error::Size(format!("filter extents must be >= 1, got {dims:?}")));
    }
    let [kt, kh, kw] = dims;
    let mut mask = Vec::with_capacity(kt * kh * kw);
    for t in 0..kt {
        let ft = normalized_frequency(t, kt);
        for y in 0..kh {
            let fy = normalized_frequency(y, kh);
            for x in 0..kw {
                let fx = normalized_frequency(x, kw);
                let v = match kind {
                    FilterKind::Gaussian => (-(ft * ft + fy * fy + fx * fx) / (2.0 * cutoff * cutoff)).exp(),
                    FilterKind::IdealBox => {
                        if ft.abs().max(fy.abs()).max(fx.abs()) <= cutoff {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    FilterKind::AllPass => 1.0,
                    FilterKind::AllStop => 0.0,
                };
                mask.push(v);
            }
        }
    }
    Ok(FrequencyFilter { dims, mask, kind: Some(kind), cutoff })
}

fn channel_volume(z: &LatentVideo, c: usize) -> Vec<f64> {
    let s = z.shape();
    let plane = s.plane_len();
    let mut out = Vec::with_capacity(s.frames * plane);
    for k in 0..s.frames {
        let start = (k * s.channels + c) * plane;
        out.extend(z.data()[start..start + plane].iter().map(|&v| v as f64));
    }
    out
}

/// `IFFT3D(FFT3D(z) * H + FFT3D(eta) * (1 - H))` per channel over
/// `(frames, height, width)`.
pub fn frequency_fuse(z: &LatentVideo, eta: &LatentVideo, filter: &FrequencyFilter) -> Result<LatentVideo> {
    z.ensure_same_shape(eta)?;
    let s = z.shape();
    if filter.dims() != [s.frames, s.height, s.width] {
        return Err(Error::shape([s.frames, s.height, s.width], filter.dims()));
    }
    let fft = FftNd::new(&filter.dims);
    let plane = s.plane_len();
    let mut out = vec![0.0f32; s.len()];
    let mut residue = 0.0f64;
    for c in 0..s.channels {
        let low = fft.forward_real(&channel_volume(z, c));
        let high = fft.forward_real(&channel_volume(eta, c));
        let mut mixed: Vec<Complex64> =
            low.iter().zip(&high).zip(filter.mask()).map(|((a, b), &h)| a * h + b * (1.0 - h)).collect();
        fft.process(&mut mixed, Direction::Inverse, true);
        for k in 0..s.frames {
            for p in 0..plane {
                let v = mixed[k * plane + p];
                residue = residue.max(v.im.abs());
                out[(k * s.channels + c) * plane + p] = v.re as f32;
            }
        }
    }
    if residue > IMAG_TOLERANCE {
        return Err(Error::FilterSymmetry { residue, tolerance: IMAG_TOLERANCE });
    }
    LatentVideo::new(s, out)
}

/// Seeded noise sources: a short local unit `eps` and full-length global
/// noise `eta`, drawn from independent streams.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseInit {
    pub eps_unit: LatentVideo,
    pub eta: LatentVideo,
    pub seed: u64,
    pub shuffle_window: usize,
}

impl NoiseInit {
    pub fn sample(seed: u64, shape: LatentShape, shuffle_window: usize) -> Result<Self> {
        if shuffle_window == 0 {
            return Err(Error::Parameter("shuffle window must be >= 1".into()));
        }
        let eps_unit = standard_normal(shape.with_frames(shuffle_window), &mut stream_rng(seed, Stream::LocalNoise, 0));
        let eta = standard_normal(shape, &mut stream_rng(seed, Stream::GlobalNoise, 0));
        Ok(NoiseInit { eps_unit, eta, seed, shuffle_window })
    }
}

/// Tiles the noise unit to `frames` frames, then permutes frame order
/// inside each consecutive block of `shuffle_window` frames.
pub fn local_noise_shuffle(init: &NoiseInit, frames: usize) -> Result<LatentVideo> {
    let window = init.shuffle_window;
    if init.eps_unit.frames() != window {
        return Err(Error::shape(window, init.eps_unit.frames()));
    }
    if frames == 0 {
        return Err(Error::Size("frame count must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..frames).map(|f| f % window).collect();
    if window > 1 {
        for (b, block) in order.chunks_mut(window).enumerate() {
            block.shuffle(&mut stream_rng(init.seed, Stream::Shuffle, b as u64));
        }
    }
    let frame_shape = init.eps_unit.shape();
    let frames: Vec<&[f32]> = order.iter().map(|&i| init.eps_unit.frame(i)).collect();
    LatentVideo::from_frames(frame_shape, &frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(k: usize, c: usize, h: usize, w: usize) -> LatentShape {
        LatentShape::new(k, c, h, w).unwrap()
    }

    fn noise(seed: u64, s: LatentShape) -> LatentVideo {
        standard_normal(s, &mut stream_rng(seed, Stream::Denoiser, 99))
    }

    fn sorted_frames(z: &LatentVideo, range: std::ops::Range<usize>) -> Vec<Vec<u32>> {
        let mut v: Vec<Vec<u32>> = range.map(|k| z.frame(k).iter().map(|x| x.to_bits()).collect()).collect();
        v.sort();
        v
    }

    #[test]
    fn box_filter_bins_on_eight_point_axis() {
        let f = make_lpf([8, 1, 1], FilterKind::IdealBox, 0.25).unwrap();
        let passed: Vec<usize> = (0..8).filter(|&t| f.at(t, 0, 0) == 1.0).collect();
        assert_eq!(passed, vec![0, 1, 2, 6, 7]);
    }

    #[test]
    fn filter_basics() {
        let f = make_lpf([4, 6, 5], FilterKind::Gaussian, 0.25).unwrap();
        assert_eq!(f.at(0, 0, 0), 1.0);
        assert!(f.is_conjugate_symmetric());
        assert!(f.mask().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(make_lpf([4, 4, 4], FilterKind::AllPass, 0.5).unwrap().mask().iter().all(|&v| v == 1.0));
        assert!(make_lpf([4, 4, 4], FilterKind::AllStop, 0.1).unwrap().mask().iter().all(|&v| v == 0.0));
        assert!(make_lpf([4, 4, 4], FilterKind::IdealBox, 0.3).unwrap().is_conjugate_symmetric());
        assert!(make_lpf([4, 4, 4], FilterKind::Gaussian, 0.0).is_err());
        assert!(make_lpf([4, 4, 4], FilterKind::Gaussian, 0.6).is_err());
    }

    #[test]
    fn fuse_identity_cases() {
        let s = shape(4, 2, 6, 5);
        let z = noise(1, s);
        let eta = noise(2, s);
        let dims = [4, 6, 5];
        let close =
            |a: &LatentVideo, b: &LatentVideo| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-5);
        let pass = make_lpf(dims, FilterKind::AllPass, 0.25).unwrap();
        let stop = make_lpf(dims, FilterKind::AllStop, 0.25).unwrap();
        let gauss = make_lpf(dims, FilterKind::Gaussian, 0.2).unwrap();
        assert!(close(&frequency_fuse(&z, &eta, &pass).unwrap(), &z));
        assert!(close(&frequency_fuse(&z, &eta, &stop).unwrap(), &eta));
        assert!(close(&frequency_fuse(&z, &z, &gauss).unwrap(), &z));
    }

    #[test]
    fn asymmetric_mask_is_rejected() {
        let s = shape(4, 1, 4, 4);
        let mut mask = vec![1.0; 64];
        mask[1] = 0.0;
        let f = FrequencyFilter::from_mask([4, 4, 4], mask).unwrap();
        assert!(!f.is_conjugate_symmetric());
        let err = frequency_fuse(&noise(3, s), &noise(4, s), &f).unwrap_err();
        assert!(matches!(err, Error::FilterSymmetry { .. }));
    }

    #[test]
    fn mismatched_filter_shape() {
        let s = shape(4, 1, 4, 4);
        let f = make_lpf([4, 4, 5], FilterKind::Gaussian, 0.25).unwrap();
        assert!(matches!(frequency_fuse(&noise(3, s), &noise(4, s), &f), Err(Error::Shape { .. })));
    }

    #[test]
    fn shuffle_window_one_tiles() {
        let init = NoiseInit::sample(5, shape(6, 2, 3, 3), 1).unwrap();
        let z = local_noise_shuffle(&init, 6).unwrap();
        for k in 0..6 {
            assert_eq!(z.frame(k), init.eps_unit.frame(0));
        }
    }

    #[test]
    fn shuffle_preserves_window_multisets() {
        let init = NoiseInit::sample(11, shape(10, 1, 2, 2), 4).unwrap();
        let z = local_noise_shuffle(&init, 10).unwrap();
        let unit = sorted_frames(&init.eps_unit, 0..4);
        assert_eq!(sorted_frames(&z, 0..4), unit);
        assert_eq!(sorted_frames(&z, 4..8), unit);
        let mut tail = sorted_frames(&init.eps_unit, 0..2);
        tail.sort();
        assert_eq!(sorted_frames(&z, 8..10), tail);
        assert_eq!(z, local_noise_shuffle(&init, 10).unwrap());
    }

    #[test]
    fn full_window_is_a_permutation() {
        let init = NoiseInit::sample(3, shape(8, 1, 2, 2), 8).unwrap();
        let z = local_noise_shuffle(&init, 8).unwrap();
        assert_eq!(sorted_frames(&z, 0..8), sorted_frames(&init.eps_unit, 0..8));
    }
}
