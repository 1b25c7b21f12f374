//! Property-based invariants across the guidance, network and metric modules.

mod common;

use std::collections::BTreeMap;

use fcsin_core::autograd::{window_merge, window_partition, Tensor};
use fcsin_core::eval_metrics::{chamfer_distance, interpolation_error, psnr, ssim};
use fcsin_core::frames_io::load_raster;
use fcsin_core::pixel_flow::{split_time, warp, FlowField};
use fcsin_core::region_corr::trapped_ball_segment;
use fcsin_core::sketch_corr::{match_keypoints, Keypoint, MatchParams};
use fcsin_core::training::{adamax_step, total_loss, DecayMode, LossWeights, OptimConfig, OptimState, StepOutcome};
use fcsin_core::Raster;
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn warp_stays_within_input_range(seed in any::<u64>(), h in 16usize..40, w in 16usize..40, amp in 0.0f64..12.0) {
        let img = random_raster(h, w, 1, seed);
        let mut r = rng(seed ^ 1);
        let flow = FlowField::from_interleaved(h, w, (0..2 * h * w).map(|_| r.gen_range(-amp..=amp)).collect()).unwrap();
        let out = warp(&img, &flow);
        let (lo, hi) = img.data().iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        prop_assert_eq!(out.dims(), img.dims());
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn split_time_scales_each_direction(seed in any::<u64>(), t in 0.001f64..0.999) {
        let mut r = rng(seed);
        let (h, w) = (16, 20);
        let mut field = || FlowField::from_interleaved(h, w, (0..2 * h * w).map(|_| r.gen_range(-5.0..5.0)).collect()).unwrap();
        let (f01, f10) = (field(), field());
        let (a, b) = split_time(&f01, &f10, t).unwrap();
        for i in 0..2 * h * w {
            prop_assert_eq!(a.data()[i], -t * f01.data()[i]);
            prop_assert_eq!(b.data()[i], -(1.0 - t) * f10.data()[i]);
        }
        prop_assert!(split_time(&f01, &f10, 0.0).is_err() && split_time(&f01, &f10, 1.0).is_err());
    }

    #[test]
    fn window_partition_round_trips(seed in any::<u64>(), c in 1usize..5, m in 1usize..5, bh in 1usize..4, bw in 1usize..4) {
        let (h, w) = (m * bh, m * bw);
        let mut r = rng(seed);
        let t = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.gen()).collect());
        let windows = window_partition(&t, m);
        prop_assert_eq!(windows.len(), bh * bw);
        prop_assert!(windows.iter().all(|win| win.len() == m * m * c));
        prop_assert_eq!(window_merge(&windows, c, h, w, m), t);
    }

    #[test]
    fn matching_is_symmetric_and_one_to_one(seed in any::<u64>(), na in 0usize..12, nb in 0usize..12) {
        let mut r = rng(seed);
        let mut kps = |n: usize| -> Vec<Keypoint> {
            (0..n)
                .map(|_| {
                    let d: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    Keypoint {
                        x: r.gen_range(0.0..64.0),
                        y: r.gen_range(0.0..64.0),
                        confidence: 1.0,
                        descriptor: d.iter().map(|v| v / norm).collect(),
                    }
                })
                .collect()
        };
        let (ka, kb) = (kps(na), kps(nb));
        let mut p = MatchParams::for_frame(64, 64);
        p.theta = 0.05;
        let ab = match_keypoints(&ka, &kb, &p).unwrap();
        let ba = match_keypoints(&kb, &ka, &p).unwrap();
        let mut fwd: Vec<(usize, usize, u64)> = ab.iter().map(|m| (m.index_a, m.index_b, m.confidence.to_bits())).collect();
        let mut rev: Vec<(usize, usize, u64)> = ba.iter().map(|m| (m.index_b, m.index_a, m.confidence.to_bits())).collect();
        fwd.sort();
        rev.sort();
        prop_assert_eq!(&fwd, &rev);
        let a: std::collections::BTreeSet<_> = ab.iter().map(|m| m.index_a).collect();
        let b: std::collections::BTreeSet<_> = ab.iter().map(|m| m.index_b).collect();
        prop_assert!(a.len() == ab.len() && b.len() == ab.len());
        prop_assert!(ab.iter().all(|m| m.confidence > p.theta && m.confidence <= 1.0));
    }

    #[test]
    fn regions_partition_free_pixels_and_mirror(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let (h, w) = (48, 48);
        let circles: Vec<(f64, f64, f64)> = (0..n).map(|_| (r.gen_range(8.0..40.0), r.gen_range(8.0..40.0), r.gen_range(3.0..12.0))).collect();
        let sketch = canvas(h, w, |x, y| {
            circles.iter().any(|&(cx, cy, rad)| (((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() - rad).abs() <= 0.5)
        });
        let m = trapped_ball_segment(&sketch, &[4, 3, 2, 1]).unwrap();
        let free = sketch.data().iter().filter(|&&v| v >= 0.5).count();
        prop_assert_eq!(m.regions.iter().map(|r| r.area).sum::<usize>(), free);
        for (l, v) in m.labels.iter().zip(sketch.data()) {
            prop_assert_eq!(*l == 0, *v < 0.5);
        }
        let mirrored = trapped_ball_segment(&sketch.flip_horizontal(), &[4, 3, 2, 1]).unwrap();
        prop_assert_eq!(mirrored.len(), m.len());
    }

    #[test]
    fn loading_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..512), png_header in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        let mut data = if png_header { b"\x89PNG\r\n\x1a\n".to_vec() } else { Vec::new() };
        data.extend(bytes);
        std::fs::write(&path, &data).unwrap();
        let _ = load_raster(&path);
    }

    #[test]
    fn error_metrics_are_monotone_in_noise(seed in any::<u64>(), a in 0.01f64..0.2, b in 0.01f64..0.2) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let base = random_raster(24, 24, 1, seed);
        let mut r = rng(seed ^ 7);
        let signs: Vec<f64> = (0..24 * 24).map(|_| if r.gen() { 1.0 } else { -1.0 }).collect();
        let noisy = |amp: f64| {
            Raster::new(24, 24, 1, base.data().iter().zip(&signs).map(|(v, s)| v * 0.5 + 0.25 + s * amp).collect()).unwrap()
        };
        let clean = noisy(0.0);
        let (x, y) = (noisy(lo), noisy(hi));
        prop_assert!(psnr(&x, &clean).unwrap() > psnr(&y, &clean).unwrap());
        prop_assert!(interpolation_error(&x, &clean).unwrap() < interpolation_error(&y, &clean).unwrap());
        prop_assert!((interpolation_error(&y, &clean).unwrap() - 100.0 * hi).abs() < 1e-9);
        prop_assert_eq!(ssim(&clean, &clean).unwrap(), 1.0);
        prop_assert!(ssim(&y, &clean).unwrap() < 1.0);
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric(seed in any::<u64>(), h in 16usize..40, w in 16usize..40, density in 0.0f64..0.3) {
        let mut r = rng(seed);
        let mut sketch = || Raster::new(h, w, 1, (0..h * w).map(|_| if r.gen::<f64>() < density { 0.0 } else { 1.0 }).collect()).unwrap();
        let (a, b) = (sketch(), sketch());
        let cd = chamfer_distance(&a, &b).unwrap();
        prop_assert_eq!(cd, chamfer_distance(&b, &a).unwrap());
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let strokes = |s: &Raster| s.data().iter().any(|&v| v < 0.5);
        if strokes(&a) && strokes(&b) {
            prop_assert_eq!(cd, chamfer_brute(&a, &b));
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum(seed in any::<u64>(), l1w in 0.0f64..100.0, lpw in 0.0f64..100.0) {
        let (p, t) = (random_raster(16, 16, 1, seed), random_raster(16, 16, 1, seed ^ 3));
        let w = LossWeights { l1: l1w, lpips: lpw };
        let b = total_loss(&p, &t, &w, 0).unwrap();
        prop_assert!(b.l1 >= 0.0 && b.lpips >= 0.0);
        prop_assert!((b.total - (l1w * b.l1 + lpw * b.lpips)).abs() <= 1e-12 * b.total.abs().max(1.0));
        let same = total_loss(&p, &p, &w, 0).unwrap();
        prop_assert_eq!((same.l1, same.total), (0.0, 0.0));
    }
}

/// Scalar AdaMax with decoupled decay written out step by step.
fn adamax_oracle(theta0: f64, grads: &[f64], c: &OptimConfig) -> f64 {
    let (mut theta, mut m, mut u) = (theta0, 0.0f64, 0.0f64);
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        u = if c.beta2 * u > g.abs() { c.beta2 * u } else { g.abs() };
        let decayed = theta - c.lr * c.weight_decay * theta;
        theta = decayed - (c.lr / (1.0 - c.beta1.powi(t))) * m / (u + c.eps);
    }
    theta
}

#[test]
fn adamax_five_steps_match_scalar_oracle() {
    let mut r = rng(5);
    for _ in 0..50 {
        let cfg = OptimConfig {
            lr: r.gen_range(1e-4..1e-1),
            weight_decay: r.gen_range(0.0..1e-2),
            ..OptimConfig::default()
        };
        assert_eq!(cfg.decay_mode, DecayMode::Param);
        let theta0 = r.gen_range(-2.0..2.0);
        let grads: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut params = BTreeMap::from([("w".to_string(), Tensor::scalar(theta0))]);
        let mut state = OptimState::new(&params);
        for &g in &grads {
            let gm = BTreeMap::from([("w".to_string(), Tensor::scalar(g))]);
            assert_eq!(adamax_step(&mut params, &gm, &mut state, &cfg).unwrap(), StepOutcome::Applied);
        }
        let expect = adamax_oracle(theta0, &grads, &cfg);
        let got = params["w"].item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert_eq!(state.step, 5);
    }
}
