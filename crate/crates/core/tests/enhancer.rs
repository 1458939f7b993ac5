use canopy_core::enhance::{
    downsample, loss_rec, reassembly_weights, train_enhancer, train_enhancer_on_features, uncertainty, upsample,
    EnhancerArch, EnhancerParams, EnhancerTrainConfig,
};
use canopy_core::features::{FeatureMap, Planes, Resolution};
use canopy_core::numerics::ParamSet;
use canopy_core::scenegen::StubExtractor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_planes(c: usize, h: usize, w: usize, seed: u64) -> Planes<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Planes::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn low(p: Planes<f64>, stride: usize) -> FeatureMap<f64> {
    FeatureMap::new(p, Resolution::Low, stride)
}

fn perturb(params: &mut ParamSet<f64>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in params.iter_mut().filter(|t| t.trainable) {
        t.values.iter_mut().for_each(|v| *v += r.gen_range(-scale..scale));
    }
}

fn zero_predictors(p: &mut EnhancerParams<f64>) {
    for t in p.params.iter_mut().filter(|t| t.name.starts_with("up")) {
        t.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One stage with uniform weights: each output cell is the mean of the
/// border-clamped `k × k` neighborhood of its source cell.
fn box_stage(x: &Planes<f64>, f: usize, k: usize) -> Planes<f64> {
    let (c, h, w) = (x.channels, x.height, x.width);
    let half = (k / 2) as isize;
    let mut out = Planes::zeros(c, h * f, w * f);
    for ch in 0..c {
        for y in 0..h * f {
            for xx in 0..w * f {
                let (sy, sx) = ((y / f) as isize, (xx / f) as isize);
                let mut acc = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let ny = (sy + dy).clamp(0, h as isize - 1) as usize;
                        let nx = (sx + dx).clamp(0, w as isize - 1) as usize;
                        acc += x.at(ch, ny, nx);
                    }
                }
                out.set(ch, y, xx, acc / (k * k) as f64);
            }
        }
    }
    out
}

#[test]
fn uniform_kernels_reduce_to_cascaded_box_means() {
    let arch = EnhancerArch {
        c_mid: 4,
        ..EnhancerArch::new(3, vec![3, 2])
    };
    let mut p = EnhancerParams::<f64>::init(arch, 5).unwrap();
    zero_predictors(&mut p);
    let lf = random_planes(3, 4, 5, 9);
    let got = upsample(&p, &low(lf.clone(), 6)).unwrap();
    let want = box_stage(&box_stage(&lf, 3, 5), 2, 5);
    assert_eq!(got.planes.shape(), want.shape());
    for (a, b) in got.planes.data.iter().zip(&want.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_tile_geometry() {
    let p = EnhancerParams::<f32>::init(EnhancerArch::new(16, vec![7, 2]), 1).unwrap();
    let lf = FeatureMap::new(Planes::<f32>::filled(16, 37, 37, 0.25), Resolution::Low, 14);
    let hf = upsample(&p, &lf).unwrap();
    assert_eq!((hf.height(), hf.width(), hf.stride), (518, 518, 1));
    let back = downsample(&p, &hf).unwrap();
    assert_eq!((back.height(), back.width(), back.stride), (37, 37, 14));
}

#[test]
fn delta_kernel_subsamples() {
    let arch = EnhancerArch {
        c_mid: 4,
        ..EnhancerArch::new(2, vec![7, 2])
    };
    let mut p = EnhancerParams::<f64>::init(arch, 0).unwrap();
    let kd = p.arch.k_down();
    p.params.require_mut("down.logits").unwrap().values[(kd / 2) * kd + kd / 2] = 1000.0;
    let hf = FeatureMap::new(random_planes(2, 28, 42, 3), Resolution::High, 1);
    let lf = downsample(&p, &hf).unwrap();
    assert_eq!(lf.planes.shape(), [2, 2, 3]);
    // Kernel center sits at padded offset 7, i.e. original offset 6.
    for c in 0..2 {
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(lf.planes.at(c, y, x), hf.planes.at(c, y * 14 + 6, x * 14 + 6));
            }
        }
    }
}

#[test]
fn downsample_matches_direct_weighted_sum() {
    let arch = EnhancerArch {
        c_mid: 4,
        ..EnhancerArch::new(2, vec![2])
    };
    let mut p = EnhancerParams::<f64>::init(arch, 0).unwrap();
    perturb(&mut p.params, 8, 2.0);
    let k = p.down_kernel().unwrap();
    let hf = FeatureMap::new(random_planes(2, 6, 8, 4), Resolution::High, 1);
    let lf = downsample(&p, &hf).unwrap();
    let (h, w) = (6isize, 8isize);
    for c in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let sy = (y as isize * 2 + i as isize - 1).clamp(0, h - 1) as usize;
                        let sx = (x as isize * 2 + j as isize - 1).clamp(0, w - 1) as usize;
                        acc += k[i * 3 + j] * hf.planes.at(c, sy, sx);
                    }
                }
                assert!((lf.planes.at(c, y, x) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn residual_norm_is_the_optimal_uncertainty() {
    let r = [0.3, -0.4, 1.2];
    let norm = (r.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let lf = low(Planes::new(3, 1, 1, r.to_vec()).unwrap(), 14);
    let rec = low(Planes::zeros(3, 1, 1), 14);
    let step = 1e-3;
    let (mut best, mut best_s) = (f64::INFINITY, 0.0);
    let mut s = 0.05;
    while s < 3.0 {
        let l = loss_rec(
            std::slice::from_ref(&lf),
            std::slice::from_ref(&rec),
            &[Planes::filled(1, 1, 1, s)],
        )
        .unwrap();
        if l < best {
            best = l;
            best_s = s;
        }
        s += step;
    }
    assert!((best_s - norm).abs() <= step, "{best_s} vs {norm}");
}

#[test]
fn fixed_points_of_the_loss() {
    let lf = low(random_planes(4, 3, 3, 1), 14);
    let zero = loss_rec(
        std::slice::from_ref(&lf),
        std::slice::from_ref(&lf),
        &[Planes::filled(1, 3, 3, 1.0)],
    )
    .unwrap();
    assert_eq!(zero, 0.0);
    let e = loss_rec(
        std::slice::from_ref(&lf),
        std::slice::from_ref(&lf),
        &[Planes::filled(1, 3, 3, std::f64::consts::E)],
    )
    .unwrap();
    assert_eq!(e, 1.0);
}

#[test]
fn fresh_uncertainty_is_one() {
    let p = EnhancerParams::<f64>::init(EnhancerArch::new(3, vec![2]), 0).unwrap();
    let s = uncertainty(&p, &low(random_planes(3, 4, 4, 0), 2)).unwrap();
    assert!(s.data.iter().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn down_kernel_sums_to_one(seed in 0u64..10_000, scale in 0.0f64..50.0) {
        let arch = EnhancerArch { c_mid: 2, ..EnhancerArch::new(1, vec![7, 2]) };
        let mut p = EnhancerParams::<f64>::init(arch, seed).unwrap();
        perturb(&mut p.params, seed, scale + 1e-9);
        let k = p.down_kernel().unwrap();
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(k.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn reassembly_weights_are_normalized(seed in 0u64..10_000, scale in 0.0f64..5.0) {
        let arch = EnhancerArch { c_mid: 4, ..EnhancerArch::new(2, vec![3, 2]) };
        let mut p = EnhancerParams::<f64>::init(arch, seed).unwrap();
        perturb(&mut p.params, seed ^ 1, scale + 1e-9);
        let lf = low(random_planes(2, 3, 4, seed), 6);
        for w in reassembly_weights(&p, &lf).unwrap() {
            let kk = 25;
            let plane = w.height * w.width;
            for group in 0..w.channels / kk {
                for pos in 0..plane {
                    let s: f64 = (0..kk).map(|j| w.data[(group * kk + j) * plane + pos]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn constants_survive_up_and_down(seed in 0u64..10_000, v in -5.0f64..5.0) {
        let arch = EnhancerArch { c_mid: 4, ..EnhancerArch::new(2, vec![3, 2]) };
        let mut p = EnhancerParams::<f64>::init(arch, seed).unwrap();
        perturb(&mut p.params, seed ^ 2, 1.0);
        let lf = low(Planes::filled(2, 3, 4, v), 6);
        let hf = upsample(&p, &lf).unwrap();
        prop_assert!(hf.planes.data.iter().all(|&x| (x - v).abs() <= 1e-5));
        let back = downsample(&p, &hf).unwrap();
        prop_assert!(back.planes.data.iter().all(|&x| (x - v).abs() <= 1e-5));
    }

    #[test]
    fn downsample_stays_within_input_range(seed in 0u64..10_000) {
        let arch = EnhancerArch { c_mid: 2, ..EnhancerArch::new(2, vec![2]) };
        let mut p = EnhancerParams::<f64>::init(arch, seed).unwrap();
        perturb(&mut p.params, seed, 3.0);
        let hf = FeatureMap::new(random_planes(2, 6, 6, seed), Resolution::High, 1);
        let (lo, hi) = hf.planes.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let lf = downsample(&p, &hf).unwrap();
        prop_assert!(lf.planes.data.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }
}

fn small_tiles() -> Vec<Planes<f32>> {
    (0..2)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(i);
            let mut p = Planes::zeros(3, 112, 112);
            for y in 0..112 {
                for x in 0..112 {
                    let base = ((y / 9 + x / 13 + i as usize) % 4) as f32 * 0.2;
                    for c in 0..3 {
                        p.set(c, y, x, base + r.gen_range(0.0..0.05));
                    }
                }
            }
            p
        })
        .collect()
}

#[test]
fn training_reduces_the_reconstruction_loss() {
    let ex = StubExtractor::new(14, 8, 3).unwrap();
    let arch = EnhancerArch {
        c_mid: 8,
        ..EnhancerArch::new(8, vec![7, 2])
    };
    let p = EnhancerParams::<f32>::init(arch, 11).unwrap();
    let cfg = EnhancerTrainConfig {
        steps: 200,
        crop_px: None,
        seed: 4,
        ..Default::default()
    };
    let (_, log) = train_enhancer(p, &small_tiles(), &ex, &cfg).unwrap();
    assert_eq!(log.len(), 200);
    let head: f64 = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let tail: f64 = log[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");
}

#[test]
fn training_is_deterministic() {
    let lfs: Vec<FeatureMap<f32>> = (0..2)
        .map(|i| FeatureMap::new(random_planes(4, 8, 8, i).cast(), Resolution::Low, 14))
        .collect();
    let arch = EnhancerArch {
        c_mid: 4,
        ..EnhancerArch::new(4, vec![7, 2])
    };
    let cfg = EnhancerTrainConfig {
        steps: 15,
        crop_px: Some(84),
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let p = EnhancerParams::<f32>::init(arch.clone(), 2).unwrap();
        let (p, log) = train_enhancer_on_features(p, &lfs, &cfg).unwrap();
        (
            p.params.to_bytes(),
            log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
