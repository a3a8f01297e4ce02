//! Latent video values.
//!
//! Storage is frames-major `(K, C, H, W)`, row-major, `f32`. Every public
//! constructor rejects non-finite data so downstream operations can assume
//! finite inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a latent video: frames, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = LatentShape { frames, channels, height, width };
        if shape.as_array().contains(&0) {
            return Err(Error::Size(format!("latent extents must be >= 1, got {:?}", shape.as_array())));
        }
        Ok(shape)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    /// Elements in one frame (`C * H * W`).
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Elements in one channel plane (`H * W`).
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same per-frame extents with a different frame count.
    pub fn with_frames(&self, frames: usize) -> Self {
        LatentShape { frames, ..*self }
    }
}

/// A latent video tensor `z` of shape `(K, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: LatentShape,
    data: Vec<f32>,
}

impl LatentVideo {
    pub fn new(shape: LatentShape, data: Vec<f32>) -> Result<Self> {
        let shape = LatentShape::new(shape.frames, shape.channels, shape.height, shape.width)?;
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent element {i}")));
        }
        Ok(LatentVideo { shape, data })
    }

    /// Builds a latent without the finiteness scan. Callers guarantee the
    /// length matches and that values came from finite arithmetic.
    pub(crate) fn from_raw(shape: LatentShape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        LatentVideo { shape, data }
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: LatentShape, value: f32) -> Self {
        assert!(value.is_finite());
        LatentVideo { shape, data: vec![value; shape.len()] }
    }

    /// Builds a latent from `f(frame, channel, y, x)`.
    pub fn from_fn(shape: LatentShape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for k in 0..shape.frames {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(k, c, y, x));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    /// Stacks equally shaped frames (each `C * H * W` long) into a video.
    pub fn from_frames(frame_shape: LatentShape, frames: &[&[f32]]) -> Result<Self> {
        let shape = frame_shape.with_frames(frames.len());
        let mut data = Vec::with_capacity(shape.len());
        for f in frames {
            if f.len() != shape.frame_len() {
                return Err(Error::shape(shape.frame_len(), f.len()));
            }
            data.extend_from_slice(f);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((k * s.channels + c) * s.height + y) * s.width + x]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn ensure_same_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape.as_array(), other.shape.as_array()));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{context} (element {i})"))),
            None => Ok(()),
        }
    }

    /// Elementwise map, checked for finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<LatentVideo> {
        let out = LatentVideo::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect());
        out.ensure_finite("map")?;
        Ok(out)
    }

    /// Elementwise binary map over two equally shaped latents.
    pub fn zip_map(&self, other: &LatentVideo, f: impl Fn(f32, f32) -> f32) -> Result<LatentVideo> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = LatentVideo::from_raw(self.shape, data);
        out.ensure_finite("zip_map")?;
        Ok(out)
    }

    /// Data widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Reorders to channels-last `(K, H, W, C)`, the layout used by most
    /// model runtimes.
    pub fn to_channels_last(&self) -> Vec<f32> {
        let s = self.shape;
        let mut out = Vec::with_capacity(s.len());
        for k in 0..s.frames {
            for y in 0..s.height {
                for x in 0..s.width {
                    for c in 0..s.channels {
                        out.push(self.get(k, c, y, x));
                    }
                }
            }
        }
        out
    }

    pub fn from_channels_last(shape: LatentShape, data: &[f32]) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        let s = shape;
        LatentVideo::from_fn(shape, |k, c, y, x| data[((k * s.height + y) * s.width + x) * s.channels + c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(k: usize, c: usize, h: usize, w: usize) -> LatentShape {
        LatentShape::new(k, c, h, w).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_zero_extent() {
        let s = shape(1, 1, 1, 2);
        assert!(matches!(LatentVideo::new(s, vec![0.0, f32::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(LatentVideo::new(s, vec![0.0]), Err(Error::Shape { .. })));
        assert!(LatentShape::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn channels_last_round_trip() {
        let s = shape(2, 3, 2, 2);
        let z = LatentVideo::from_fn(s, |k, c, y, x| (k * 1000 + c * 100 + y * 10 + x) as f32).unwrap();
        let cl = z.to_channels_last();
        assert_eq!(cl[0..3], [0.0, 100.0, 200.0]);
        assert_eq!(LatentVideo::from_channels_last(s, &cl).unwrap(), z);
    }

    #[test]
    fn frame_slicing() {
        let s = shape(3, 1, 1, 2);
        let z = LatentVideo::new(s, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(z.frame(1), &[2.0, 3.0]);
        assert_eq!(z.get(2, 0, 0, 1), 5.0);
    }
}
