//! Multi-dimensional FFTs over row-major complex buffers, built from
//! `rustfft` 1-D transforms applied axis by axis.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Direction of a transform. Inverse transforms are scaled by `1/N` when
/// `normalize` is set on [`FftNd::process`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned N-dimensional transform for a fixed row-major shape.
pub struct FftNd {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub fn new(dims: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        FftNd {
            dims: dims.to_vec(),
            forward: dims.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-place transform of `buf` (length = product of dims).
    pub fn process(&self, buf: &mut [Complex64], dir: Direction, normalize: bool) {
        assert_eq!(buf.len(), self.len());
        let plans = match dir {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        let mut line = Vec::new();
        for (axis, plan) in plans.iter().enumerate() {
            let n = self.dims[axis];
            if n == 1 {
                continue;
            }
            let inner: usize = self.dims[axis + 1..].iter().product();
            let outer: usize = self.dims[..axis].iter().product();
            line.resize(n, Complex64::new(0.0, 0.0));
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    for (k, slot) in line.iter_mut().enumerate() {
                        *slot = buf[base + k * inner];
                    }
                    plan.process(&mut line);
                    for (k, v) in line.iter().enumerate() {
                        buf[base + k * inner] = *v;
                    }
                }
            }
        }
        if dir == Direction::Inverse && normalize {
            let scale = 1.0 / self.len() as f64;
            buf.iter_mut().for_each(|v| *v *= scale);
        }
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.process(&mut buf, Direction::Forward, false);
        buf
    }
}

/// Signed normalized frequency of bin `k` on an `n`-point axis, following
/// the usual `fftfreq` convention (`k/n` up to `(n-1)/2`, negative above).
pub fn normalized_frequency(k: usize, n: usize) -> f64 {
    if k <= (n - 1) / 2 {
        k as f64 / n as f64
    } else {
        -((n - k) as f64) / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_follow_fftfreq() {
        let f: Vec<f64> = (0..8).map(|k| normalized_frequency(k, 8)).collect();
        assert_eq!(f, vec![0.0, 0.125, 0.25, 0.375, -0.5, -0.375, -0.25, -0.125]);
        let f: Vec<f64> = (0..5).map(|k| normalized_frequency(k, 5)).collect();
        assert_eq!(f, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
        assert_eq!(normalized_frequency(0, 1), 0.0);
    }

    #[test]
    fn round_trip_3d() {
        let dims = [3, 4, 5];
        let fft = FftNd::new(&dims);
        let data: Vec<f64> = (0..60).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let mut buf = fft.forward_real(&data);
        fft.process(&mut buf, Direction::Inverse, true);
        for (a, b) in buf.iter().zip(&data) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_is_sum() {
        let fft = FftNd::new(&[2, 3]);
        let spec = fft.forward_real(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!((spec[0].re - 21.0).abs() < 1e-12);
    }
}
