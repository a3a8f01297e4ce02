//! Binary PPM (P6) frame export.
//!
//! Channels: the first three become RGB when `C >= 3`; otherwise channel 0
//! is replicated as gray. Values are mapped into `[-1, 1]` and then to bytes
//! with `round((v + 1) * 127.5)`.
//!
//! * `minmax`: `v -> 2 (v - min) / (max - min) - 1` with `min`/`max` over the
//!   exported channels of the whole video. A constant video has no range and
//!   maps to 0, i.e. mid-gray 128.
//! * `clamp`: `v -> clamp(v, -1, 1)`.

use std::path::{Path, PathBuf};

use crate::config::Normalize;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;

fn exported_channels(channels: usize) -> [usize; 3] {
    if channels >= 3 {
        [0, 1, 2]
    } else {
        [0, 0, 0]
    }
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `P6` image bytes for every frame of `z`.
pub fn encode_frames(z: &LatentVideo, normalize: Normalize) -> Vec<Vec<u8>> {
    let s = z.shape();
    let chans = exported_channels(s.channels);
    let plane = s.plane_len();
    let (lo, hi) = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..s.frames {
            let f = z.frame(k);
            for &c in &chans[..if s.channels >= 3 { 3 } else { 1 }] {
                for &v in &f[c * plane..(c + 1) * plane] {
                    lo = lo.min(v as f64);
                    hi = hi.max(v as f64);
                }
            }
        }
        (lo, hi)
    };
    let map = |v: f32| -> u8 {
        let v = v as f64;
        match normalize {
            Normalize::Clamp => to_byte(v.clamp(-1.0, 1.0)),
            Normalize::Minmax if hi > lo => to_byte(2.0 * (v - lo) / (hi - lo) - 1.0),
            Normalize::Minmax => to_byte(0.0),
        }
    };
    (0..s.frames)
        .map(|k| {
            let f = z.frame(k);
            let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
            out.reserve(plane * 3);
            for p in 0..plane {
                for &c in &chans {
                    out.push(map(f[c * plane + p]));
                }
            }
            out
        })
        .collect()
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:05}.ppm")
}

/// Writes `frame_00000.ppm`, `frame_00001.ppm`, ... into `dir`, creating it
/// if needed.
pub fn export_frames(z: &LatentVideo, dir: impl AsRef<Path>, normalize: Normalize) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::Format {
        path: dir.to_path_buf(),
        message: format!("cannot create output directory: {e}"),
    })?;
    encode_frames(z, normalize)
        .into_iter()
        .enumerate()
        .map(|(k, bytes)| {
            let path = dir.join(frame_name(k));
            std::fs::write(&path, bytes)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;

    #[test]
    fn constant_minmax_is_mid_gray() {
        let z = LatentVideo::filled(LatentShape::new(2, 4, 2, 3).unwrap(), 7.5);
        let frames = encode_frames(&z, Normalize::Minmax);
        assert_eq!(frames.len(), 2);
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&frames[0][..header.len()], header);
        assert!(frames[0][header.len()..].iter().all(|&b| b == 128));
        assert_eq!(frames[0].len(), header.len() + 18);
    }

    #[test]
    fn grayscale_replication_and_clamp() {
        let shape = LatentShape::new(1, 1, 1, 4).unwrap();
        let z = LatentVideo::new(shape, vec![-3.0, -1.0, 0.0, 1.0]).unwrap();
        let f = &encode_frames(&z, Normalize::Clamp)[0];
        let px = &f[f.len() - 12..];
        assert_eq!(px, &[0, 0, 0, 0, 0, 0, 128, 128, 128, 255, 255, 255]);
        let f = &encode_frames(&z, Normalize::Minmax)[0];
        let px = &f[f.len() - 12..];
        // -3 -> 0, -1 -> 127.5 -> 128, 0 -> 191.25 -> 191, 1 -> 255
        assert_eq!(px, &[0, 0, 0, 128, 128, 128, 191, 191, 191, 255, 255, 255]);
    }

    #[test]
    fn names_are_zero_padded() {
        assert_eq!(frame_name(0), "frame_00000.ppm");
        assert_eq!(frame_name(123), "frame_00123.ppm");
    }
}
