use glcd_core::clip_maps::{
    clip_weights, gather, make_global_maps, make_local_maps, ClipAccumulator, ShiftMode, ShiftPlan, WeightKind,
    WeightProfile,
};
use glcd_core::denoiser::attention::{attention_weights, AttnMatrix};
use glcd_core::fusion::{annealing_gamma, fuse_path, glcd_fuse, AnnealParams, PathBatch};
use glcd_core::io::npy::{decode_npy, encode_npy};
use glcd_core::noise_reinit::{local_noise_shuffle, NoiseInit};
use glcd_core::rng::{standard_normal, stream_rng, Stream};
use glcd_core::spectral::FftNd;
use glcd_core::vmcr::wrap_phase;
use glcd_core::{LatentShape, LatentVideo};
use proptest::prelude::*;

fn noise(shape: LatentShape, seed: u64) -> LatentVideo {
    standard_normal(shape, &mut stream_rng(seed, Stream::Denoiser, 7))
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=40).prop_flat_map(|k| (Just(k), 1..=k)).prop_flat_map(|(k, l)| (Just(k), Just(l), 1..=l))
}

fn coverage_counts(maps: &[glcd_core::clip_maps::ClipMap], frames: usize) -> Vec<f64> {
    let shape = LatentShape::new(frames, 1, 1, 1).unwrap();
    let mut acc = ClipAccumulator::new(shape);
    for m in maps {
        let clip = LatentVideo::zeros(shape.with_frames(m.len()));
        acc.scatter_accumulate(&clip, m, &clip_weights(m.len(), WeightKind::Uniform).unwrap()).unwrap();
    }
    acc.denominator().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_frame_is_covered((k, l, stride) in geometry(), seed in any::<u64>(), t in 0usize..1000, per_clip in any::<bool>()) {
        let mode = if per_clip { ShiftMode::PerClip } else { ShiftMode::Shared };
        let local = make_local_maps(k, l, stride, t, &ShiftPlan::new(seed).with_mode(mode)).unwrap();
        prop_assert!(local.iter().all(|m| m.len() == l));
        prop_assert!(coverage_counts(&local, k).iter().all(|&c| c >= 1.0));

        let d = k.div_ceil(l);
        let global = make_global_maps(k, l, d, d * l).unwrap();
        prop_assert_eq!(global.len(), d);
        let mut hits = vec![0; k];
        for i in global.iter().flat_map(|m| m.indices().to_vec()).filter(|&i| i < k) {
            hits[i] += 1;
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn fused_path_is_a_convex_combination(k in 2usize..12, seed in any::<u64>(), scale in 0.1f32..10.0) {
        let l = (k / 2).max(1);
        let shape = LatentShape::new(k, 2, 2, 2).unwrap();
        let maps = make_local_maps(k, l, 1.max(l / 2), 3, &ShiftPlan::new(seed)).unwrap();
        let clips: Vec<LatentVideo> = maps.iter().enumerate().map(|(i, m)| noise(shape.with_frames(m.len()), seed ^ i as u64)).collect();
        let weights: Vec<WeightProfile> = maps.iter().map(|m| clip_weights(m.len(), WeightKind::Triangular).unwrap()).collect();
        let scaled: Vec<WeightProfile> = weights.iter().map(|w| w.scaled(scale).unwrap()).collect();
        let fused = fuse_path(&PathBatch::new(clips.clone(), maps.clone(), weights).unwrap(), k).unwrap();
        let rescaled = fuse_path(&PathBatch::new(clips.clone(), maps.clone(), scaled).unwrap(), k).unwrap();
        for (a, b) in fused.data().iter().zip(rescaled.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
        let n = shape.frame_len();
        for f in 0..k {
            for p in 0..n {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for (clip, m) in clips.iter().zip(&maps) {
                    for j in (0..m.len()).filter(|&j| m.real_frame(j) == f) {
                        lo = lo.min(clip.frame(j)[p]);
                        hi = hi.max(clip.frame(j)[p]);
                    }
                }
                let v = fused.frame(f)[p];
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn blend_is_affine_and_bounded(seed in any::<u64>(), gamma in 0.0f64..=1.0) {
        let shape = LatentShape::new(3, 2, 3, 3).unwrap();
        let (g, l) = (noise(shape, seed), noise(shape, seed.wrapping_add(1)));
        let out = glcd_fuse(&g, &l, gamma).unwrap().latent;
        for ((o, a), b) in out.data().iter().zip(g.data()).zip(l.data()) {
            prop_assert!(*o >= a.min(*b) - 1e-6 && *o <= a.max(*b) + 1e-6);
            let expect = gamma * *a as f64 + (1.0 - gamma) * *b as f64;
            prop_assert!((*o as f64 - expect).abs() <= 1e-5);
        }
        prop_assert_eq!(glcd_fuse(&g, &l, 1.0).unwrap().latent, g.clone());
        prop_assert_eq!(glcd_fuse(&g, &l, 0.0).unwrap().latent, l.clone());
    }

    #[test]
    fn gamma_is_monotone_and_bounded(t in 0usize..999, gamma0 in 1e-4f64..1.0, beta in 0.0f64..0.01) {
        let p = AnnealParams::new(gamma0, beta).unwrap();
        let (a, b) = (annealing_gamma(t, &p), annealing_gamma(t + 1, &p));
        prop_assert!(a > 0.0 && a <= 1.0 && a <= b);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let dim = 3;
        let q = noise(LatentShape::new(rows, dim, 1, 1).unwrap(), seed).map(|v| 10.0 * v).unwrap();
        let k = noise(LatentShape::new(cols, dim, 1, 1).unwrap(), !seed).map(|v| 10.0 * v).unwrap();
        let q = AttnMatrix::new(rows, dim, q.data().to_vec()).unwrap();
        let k = AttnMatrix::new(cols, dim, k.data().to_vec()).unwrap();
        let w = attention_weights(&q, &k).unwrap();
        for r in 0..rows {
            let row = w.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fft_is_linear(dims in prop::array::uniform3(1usize..7), a in -3.0f64..3.0, seed in any::<u64>()) {
        let len = dims.iter().product();
        let x = noise(LatentShape::new(len, 1, 1, 1).unwrap(), seed).to_f64();
        let y = noise(LatentShape::new(len, 1, 1, 1).unwrap(), !seed).to_f64();
        let fft = FftNd::new(&dims);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
        let (fx, fy, fc) = (fft.forward_real(&x), fft.forward_real(&y), fft.forward_real(&combo));
        for ((u, v), c) in fx.iter().zip(&fy).zip(&fc) {
            prop_assert!((u * a + v - c).norm() < 1e-9 * (len as f64));
        }
    }

    #[test]
    fn shuffle_permutes_within_windows(frames in 1usize..30, window in 1usize..8, seed in any::<u64>()) {
        let shape = LatentShape::new(frames, 2, 2, 1).unwrap();
        let init = NoiseInit::sample(seed, shape, window).unwrap();
        let z = local_noise_shuffle(&init, frames).unwrap();
        prop_assert_eq!(z.shape(), shape);
        let key = |f: &[f32]| f.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        for (b, start) in (0..frames).step_by(window).enumerate() {
            let end = (start + window).min(frames);
            let mut got: Vec<_> = (start..end).map(|f| key(z.frame(f))).collect();
            let mut want: Vec<_> = (start..end).map(|f| key(init.eps_unit.frame(f % window))).collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want, "block {}", b);
        }
    }

    #[test]
    fn npy_round_trip_is_bitwise(k in 1usize..5, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let z = noise(LatentShape::new(k, c, h, w).unwrap(), seed);
        let back = decode_npy(&encode_npy(&z), std::path::Path::new("x.npy")).unwrap();
        prop_assert_eq!(back.shape(), z.shape());
        prop_assert!(back.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wrapped_phase_stays_in_range(x in -100.0f64..100.0) {
        let w = wrap_phase(x);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let turns = (x - w) / std::f64::consts::TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn gather_reads_padded_frames(k in 1usize..20, l in 1usize..6, seed in any::<u64>()) {
        let l = l.min(k);
        let z = noise(LatentShape::new(k, 1, 2, 2).unwrap(), seed);
        let d = k.div_ceil(l);
        for m in make_global_maps(k, l, d, d * l).unwrap() {
            let clip = gather(&z, &m).unwrap();
            for j in 0..m.len() {
                prop_assert_eq!(clip.frame(j), z.frame(m.real_frame(j)));
            }
        }
    }
}
