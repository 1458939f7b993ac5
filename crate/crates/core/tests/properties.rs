mod support;

use canopy_core::augment::{apply_feature, apply_image, ViewTransform};
use canopy_core::evalmetrics::compute_metrics;
use canopy_core::features::{features_from_bytes, features_to_bytes, FeatureMap, Planes, Resolution};
use canopy_core::forestry::{
    agb_single, detect_trees, detection_success, growth_rate, parcel_agb, DetectedTree, Parcel, ParcelMask, Species,
};
use canopy_core::numerics::{ParamSet, ParamTensor};
use canopy_core::raster::{plan_tiles, raster_from_bytes, raster_to_bytes, RasterGrid};
use canopy_core::scenegen::{generate_scene, render_crown, ParcelSpec, SceneConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{direct_metrics, exhaustive_detect, is_verified_maximum, normal_equations_slope};

fn grid(v: Vec<f64>) -> RasterGrid {
    let n = v.len();
    RasterGrid::new(n, 1, 1.0, v).unwrap()
}

fn pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..25.0)).collect();
    let b = a.iter().map(|v| v + r.gen_range(-3.0..3.0)).collect();
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_definitions(seed in 0u64..10_000, n in 2usize..200) {
        let (p, r) = pair(seed, n);
        let m = compute_metrics(&grid(p.clone()), &grid(r.clone()), None).unwrap();
        let d = direct_metrics(&p, &r);
        prop_assert!((m.bias - d.bias).abs() < 1e-10);
        prop_assert!((m.mae - d.mae).abs() < 1e-10);
        prop_assert!((m.rmse - d.rmse).abs() < 1e-10);
        prop_assert!((m.r2.unwrap() - d.r2).abs() < 1e-10);
        prop_assert!((m.r2_determination.unwrap() - d.r2_determination).abs() < 1e-10);
        prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m.r2.unwrap()));
    }

    #[test]
    fn metrics_ignore_cell_order(seed in 0u64..10_000, n in 2usize..100) {
        let (p, r) = pair(seed, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let a = compute_metrics(&grid(p.clone()), &grid(r.clone()), None).unwrap();
        let b = compute_metrics(
            &grid(order.iter().map(|&i| p[i]).collect()),
            &grid(order.iter().map(|&i| r[i]).collect()),
            None,
        ).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-10);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-10);
        prop_assert!((a.r2.unwrap() - b.r2.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn shifting_prediction_moves_only_bias(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let (_, r) = pair(seed, 50);
        let p: Vec<f64> = r.iter().map(|v| v + shift).collect();
        let m = compute_metrics(&grid(p), &grid(r), None).unwrap();
        prop_assert!((m.bias - shift).abs() < 1e-9);
        prop_assert!((m.mae - shift.abs()).abs() < 1e-9);
        prop_assert!((m.r2.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pearson_r2_is_affine_invariant(seed in 0u64..10_000, a in 0.1f64..4.0, b in -10.0f64..10.0) {
        let (p, r) = pair(seed, 60);
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let m0 = compute_metrics(&grid(p), &grid(r.clone()), None).unwrap();
        let m1 = compute_metrics(&grid(q), &grid(r), None).unwrap();
        prop_assert!((m0.r2.unwrap() - m1.r2.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tiles_are_disjoint_and_cover_the_kept_area(
        h in 1usize..300, w in 1usize..300, tile in 1usize..120,
    ) {
        prop_assume!(tile <= h && tile <= w);
        let m = plan_tiles(h, w, tile, 0).unwrap();
        let mut hits = vec![0u8; h * w];
        for t in &m.tiles {
            for r in t.row..t.row + t.size {
                for c in t.col..t.col + t.size {
                    hits[r * w + c] += 1;
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                let kept = r < h - m.dropped_rows && c < w - m.dropped_cols;
                prop_assert_eq!(hits[r * w + c], kept as u8);
            }
        }
        prop_assert!(m.dropped_rows < tile && m.dropped_cols < tile);
    }

    #[test]
    fn invertible_views_round_trip(seed in 0u64..10_000, pad in 0usize..4, kind in 0usize..4) {
        let patch = 2;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (patch * r.gen_range(1..6), patch * r.gen_range(1..6));
        let data = (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let tile = Planes::new(3, h, w, data).unwrap();
        let t = match kind {
            0 => ViewTransform::Identity,
            1 => ViewTransform::FlipH,
            2 => ViewTransform::FlipV,
            _ => ViewTransform::Pad { amount: pad * patch },
        };
        let v = apply_image(&t, &tile, patch).unwrap();
        let back = apply_image(&t.inverse(h, w).unwrap(), &v, patch).unwrap();
        prop_assert_eq!(back, tile);
    }

    #[test]
    fn feature_views_agree_with_subsampled_image_views(seed in 0u64..10_000, kind in 0usize..4) {
        // On a patch-constant image every pixel of a patch equals its cell.
        let s = 3;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (gh, gw) = (r.gen_range(2..6), r.gen_range(2..6));
        let cells: Vec<f64> = (0..gh * gw).map(|_| r.gen_range(0.0..1.0)).collect();
        let img_data = (0..gh * s * gw * s).map(|i| cells[(i / (gw * s)) / s * gw + (i % (gw * s)) / s]).collect();
        let img = Planes::new(1, gh * s, gw * s, img_data).unwrap();
        let t = match kind {
            0 => ViewTransform::FlipH,
            1 => ViewTransform::FlipV,
            2 => ViewTransform::Pad { amount: s },
            _ => ViewTransform::Crop { row: s, col: 0, height: s, width: s * (gw - 1) },
        };
        let feats = FeatureMap::new(Planes::new(1, gh, gw, cells).unwrap(), Resolution::Low, s);
        let fv = apply_feature(&t, &feats).unwrap();
        let iv = apply_image(&t, &img, s).unwrap();
        for y in 0..fv.height() {
            for x in 0..fv.width() {
                prop_assert_eq!(fv.planes.at(0, y, x), iv.at(0, y * s, x * s));
            }
        }
    }

    #[test]
    fn detection_matches_exhaustive_scan(seed in 0u64..10_000, radius in 1.0f64..4.5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (r.gen_range(8..24), r.gen_range(8..24));
        let mut chm = RasterGrid::filled(w, h, 1.0, 0.0);
        for _ in 0..r.gen_range(0..8) {
            render_crown(&mut chm, r.gen_range(0..h), r.gen_range(0..w), r.gen_range(1.0..15.0));
        }
        // Quantized heights make exact ties and plateaus common.
        chm.values.iter_mut().for_each(|v| *v = (*v * 2.0).round() / 2.0);
        let got = detect_trees(&chm, radius, 2.0).unwrap();
        prop_assert_eq!(&got, &exhaustive_detect(&chm, radius, 2.0));
        for t in &got {
            prop_assert!(is_verified_maximum(&chm, t, radius, 2.0));
        }
    }

    #[test]
    fn parcel_agb_is_additive_and_order_free(seed in 0u64..10_000, sp in 0usize..3) {
        let species = Species::ALL[sp];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let trees: Vec<DetectedTree> = (0..r.gen_range(1..30))
            .map(|_| DetectedTree { row: r.gen_range(0..10), col: r.gen_range(0..10), height_m: r.gen_range(0.0..30.0) })
            .collect();
        let parcel = Parcel::new(1, species, 10, ParcelMask::from_rect(10, 10, 0, 0, 10, 10)).unwrap();
        let all = parcel_agb(&parcel, &trees).unwrap();
        let k = trees.len() / 2;
        let a = parcel_agb(&parcel, &trees[..k]).unwrap();
        let b = parcel_agb(&parcel, &trees[k..]).unwrap();
        prop_assert!((all.total_kg - (a.total_kg + b.total_kg)).abs() < 1e-9 * all.total_kg.abs().max(1.0));
        prop_assert_eq!(all.tree_count, a.tree_count + b.tree_count);
        let rev: Vec<_> = trees.iter().rev().copied().collect();
        let c = parcel_agb(&parcel, &rev).unwrap();
        prop_assert!((c.total_kg - all.total_kg).abs() < 1e-9 * all.total_kg.abs().max(1.0));
        let direct: f64 = trees.iter().map(|t| agb_single(species, t.height_m).unwrap()).sum();
        prop_assert!((all.total_kg - direct).abs() < 1e-9 * direct.abs().max(1.0));
        prop_assert!((all.mean_kg.unwrap() * all.tree_count as f64 - all.total_kg).abs() < 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn growth_slope_matches_normal_equations(seed in 0u64..10_000, n in 2usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..n).map(|i| (2010.0 + i as f64, r.gen_range(0.0..500.0))).collect();
        let got = growth_rate(&pts).unwrap();
        let want = normal_equations_slope(&pts);
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn raster_bytes_round_trip(seed in 0u64..10_000, h in 1usize..20, w in 1usize..20, nodata in proptest::bool::ANY) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = RasterGrid::new(w, h, r.gen_range(0.1..5.0), (0..h * w).map(|_| r.gen_range(-1e3..1e3)).collect()).unwrap();
        g.origin = (r.gen_range(-1e5..1e5), r.gen_range(-1e5..1e5));
        if nodata {
            g = g.with_nodata(-9999.0);
            g.values[0] = -9999.0;
        }
        let bytes = raster_to_bytes(&g);
        let back = raster_from_bytes(&bytes).unwrap();
        prop_assert_eq!(raster_to_bytes(&back), bytes);
        prop_assert!(back.values.iter().zip(&g.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn feature_bytes_round_trip(seed in 0u64..10_000, c in 1usize..5, h in 1usize..8, w in 1usize..8, stride in 1usize..15) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..c * h * w).map(|_| r.gen_range(-10.0..10.0)).collect();
        let f = FeatureMap::new(Planes::new(c, h, w, data).unwrap(), Resolution::High, stride);
        let bytes = features_to_bytes(&f);
        let back = features_from_bytes::<f32>(&bytes, Some((h * stride, w * stride))).unwrap();
        prop_assert_eq!(features_to_bytes(&back), bytes);
    }

    #[test]
    fn param_bytes_round_trip(seed in 0u64..10_000, k in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        for i in 0..k {
            let shape = [r.gen_range(1..4), r.gen_range(1..4)];
            let v = (0..shape[0] * shape[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
            p.insert(ParamTensor::new(format!("t{i}"), &shape, v).unwrap()).unwrap();
        }
        p.set_meta(serde_json::json!({"seed": seed}));
        let bytes = p.to_bytes();
        let back = ParamSet::<f64>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

fn small_scene(seed: u64, spacing: f64, height_jitter: f64, position_jitter: f64) -> SceneConfig {
    SceneConfig {
        height: 48,
        width: 60,
        cell_size: 1.0,
        parcels: vec![ParcelSpec {
            id: 1,
            species: Species::PinusTabulaeformis,
            age_years: 12,
            year: None,
            row: 0,
            col: 0,
            rows: 48,
            cols: 60,
            spacing_m: spacing,
            mean_height_m: 10.0,
            height_jitter_m: height_jitter,
            position_jitter_m: position_jitter,
        }],
        rgb_noise: 0.02,
        rgb_height_ref_m: 30.0,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_are_reproducible_and_bounded(seed in 0u64..10_000, spacing in 2.0f64..9.0) {
        let cfg = small_scene(seed, spacing, 2.0, 0.5);
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        prop_assert_eq!(&a.chm, &b.chm);
        prop_assert_eq!(&a.rgb, &b.rgb);
        prop_assert_eq!(&a.trees, &b.trees);
        prop_assert_eq!(a.trees.len(), cfg.planned_tree_count());
        let tallest = a.trees.iter().map(|t| t.height_m).fold(0.0, f64::max);
        prop_assert!(a.chm.values.iter().all(|&v| (0.0..=tallest).contains(&v)));
        prop_assert!(a.rgb.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn well_spaced_trees_are_all_found(seed in 0u64..10_000, jitter in 0.0f64..3.0) {
        // Spacing 12 m with a 5 m window keeps every neighbour outside the disc.
        let scene = generate_scene(&small_scene(seed, 12.0, jitter, 0.0)).unwrap();
        let found = detect_trees(&scene.chm, 5.0, 2.0).unwrap();
        let found_pos: Vec<_> = found.iter().map(|t| (t.row, t.col)).collect();
        let mut truth: Vec<_> = scene.trees.iter().map(|t| (t.row, t.col)).collect();
        truth.sort();
        prop_assert_eq!(&found_pos, &truth);
        prop_assert_eq!(detection_success(&found_pos, &truth, 2.0, 1.0).unwrap(), 1.0);
    }
}

#[test]
fn nine_crowns_detected_where_planted() {
    let mut chm = RasterGrid::filled(40, 40, 1.0, 0.0);
    let mut truth = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let (r, c) = (8 + 12 * i, 8 + 12 * j);
            render_crown(&mut chm, r, c, 6.0 + (i * 3 + j) as f64);
            truth.push((r, c));
        }
    }
    let found = detect_trees(&chm, 5.0, 2.0).unwrap();
    assert_eq!(found, exhaustive_detect(&chm, 5.0, 2.0));
    assert_eq!(found.iter().map(|t| (t.row, t.col)).collect::<Vec<_>>(), truth);
}

#[test]
fn one_missed_tree_of_nine() {
    let truth: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |j| (10 * i, 10 * j))).collect();
    let mut found = truth.clone();
    found[4] = (found[4].0 + 3, found[4].1);
    assert_eq!(detection_success(&found, &truth, 2.0, 1.0).unwrap(), 8.0 / 9.0);
}

#[test]
fn exp_of_one() {
    let mut g = canopy_core::numerics::Graph::<f64>::new();
    let x = g.constant(&[1], vec![1.0]).unwrap();
    let y = g.exp(x).unwrap();
    let series: f64 = (0..20)
        .scan(1.0, |f, k| {
            let term = 1.0 / *f;
            *f *= (k + 1) as f64;
            Some(term)
        })
        .sum();
    assert!((g.value(y)[0] - series).abs() < 1e-9);
}
