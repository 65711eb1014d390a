use cap_core::bank::{FeatureSet, FeatureVector, MemoryBank};
use cap_core::heatmap::{anomaly_heatmap, bilinear_upsample, SpatialFeatureMap, SpatialMapSet};
use cap_core::model::{forward, init_model, HeadVariant, ModelParams};
use cap_core::scoring::{anomaly_score, auroc};
use cap_core::synthetic::{knn_oracle, pairwise_auroc_oracle};
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 256,
        ..ProptestConfig::default()
    }
}

fn random_bank(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MemoryBank {
    let features: Vec<FeatureVector> = (0..n)
        .map(|_| loop {
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f32>() > 1e-3 {
                break FeatureVector::new(v).unwrap();
            }
        })
        .collect();
    let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
    MemoryBank::build(&features, &ids).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, variant: HeadVariant, attention: bool) -> ModelParams {
    let mut model = init_model(d, variant, attention, rng.random());
    for kind in model.param_kinds() {
        for v in model.param_mut(kind).iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

fn variant_strategy() -> impl Strategy<Value = HeadVariant> {
    prop::sample::select(HeadVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn forward_structure(seed in any::<u64>(), d in 2usize..10, n in 3usize..30, variant in variant_strategy(), attention in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, n, d);
        let model = random_model(&mut rng, d, variant, attention);
        let k = rng.random_range(1..=n);
        let query: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        prop_assume!(query.iter().map(|x| x * x).sum::<f32>() > 1e-3);
        let neighbors = bank.top_k_neighbors(&query, k, None).unwrap();
        let out = forward(&model, &query, &neighbors).unwrap();

        for row in out.attention_matrix.rows() {
            prop_assert!((row.sum() - 1.0).abs() < TOL);
        }
        prop_assert!((out.mix_weights.sum() - 2.0).abs() < TOL);
        for &w in out.mix_weights.iter() {
            prop_assert!(w >= 1.0 / k as f64 - TOL);
        }
        let rebuilt = out.m_hat.t().dot(&out.mix_weights);
        for (a, b) in rebuilt.iter().zip(out.z_normal.iter()) {
            prop_assert!((a - b).abs() < TOL * (1.0 + b.abs()));
        }

        let score = anomaly_score(&model, &bank, &query, k).unwrap();
        prop_assert!((0.0..=2.0).contains(&score.score));
    }

    #[test]
    fn heatmap_of_normal_representation_against_itself_is_zero(seed in any::<u64>(), d in 2usize..8, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 6, d);
        let model = random_model(&mut rng, d, HeadVariant::Linear, true);
        let neighbors = bank.top_k_neighbors(bank.row(0), 3, Some(0)).unwrap();
        let out = forward(&model, bank.row(0), &neighbors).unwrap();
        prop_assume!(out.z_normal.dot(&out.z_normal) > 1e-12);
        let grid = Array3::from_shape_fn((h, w, d), |_| rng.random_range(-1.0f32..1.0));
        let map = SpatialFeatureMap::new("q", grid).unwrap();
        let zn = out.z_normal.to_vec();
        let result = anomaly_heatmap(&zn, &zn, &map, h + 3, w + 5).unwrap();
        prop_assert!(result.raw.iter().all(|&v| v == 0.0));
        prop_assert!(result.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_scale_and_swap_invariance(seed in any::<u64>(), d in 2usize..8, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Array3::from_shape_fn((3, 2, d), |_| rng.random_range(-1.0f32..1.0));
        let map = SpatialFeatureMap::new("s", grid).unwrap();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zn: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(z.iter().map(|x| x * x).sum::<f64>() > 1e-6 && zn.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let base = anomaly_heatmap(&z, &zn, &map, 5, 5).unwrap();
        let za: Vec<f64> = z.iter().map(|x| x * a).collect();
        let znb: Vec<f64> = zn.iter().map(|x| x * b).collect();
        let scaled = anomaly_heatmap(&za, &znb, &map, 5, 5).unwrap();
        for (x, y) in base.upsampled.iter().zip(scaled.upsampled.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let swapped = anomaly_heatmap(&zn, &z, &map, 5, 5).unwrap();
        prop_assert_eq!(swapped.upsampled, base.upsampled);
    }

    #[test]
    fn upsample_stays_within_bounds_and_hits_corners(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, eh in 0usize..10, ew in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..2.0));
        let up = bilinear_upsample(&grid, h + eh, w + ew).unwrap();
        let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(up.iter().all(|&v| v >= lo && v <= hi));
        let (th, tw) = up.dim();
        prop_assert_eq!(up[[0, 0]], grid[[0, 0]]);
        prop_assert_eq!(up[[th - 1, tw - 1]], grid[[h - 1, w - 1]]);
        prop_assert_eq!(up[[0, tw - 1]], grid[[0, w - 1]]);
        prop_assert_eq!(up[[th - 1, 0]], grid[[h - 1, 0]]);
    }

    #[test]
    fn bank_file_round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..20, d in 1usize..12, labeled in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((n, d), |_| f32::from_bits(rng.random_range(0u32..0x7f00_0000)) * if rng.random() { 1.0 } else { -1.0 });
        let ids: Vec<String> = (0..n).map(|i| format!("id-{i}-{}", rng.random::<u16>())).collect();
        let labels = labeled.then(|| (0..n).map(|_| rng.random_range(0..2u8)).collect());
        let mut set = FeatureSet::new(ids, rows, labels).unwrap();
        set.provenance.insert("backbone".into(), "test".into());
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = FeatureSet::read_from(buf.as_slice()).unwrap();
        for (a, b) in back.rows.iter().zip(set.rows.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(&back.ids, &set.ids);
        prop_assert_eq!(&back.labels, &set.labels);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn memory_bank_file_round_trip(seed in any::<u64>(), n in 1usize..20, d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, n, d);
        let mut buf = Vec::new();
        bank.save(&mut buf).unwrap();
        let back = MemoryBank::load(buf.as_slice()).unwrap();
        prop_assert_eq!(back.items(), bank.items());
        prop_assert_eq!(back.norms(), bank.norms());
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn model_file_round_trip_is_bit_exact(seed in any::<u64>(), d in 1usize..10, variant in variant_strategy(), attention in any::<bool>()) {
        // Weights are kept at f32 precision on disk, so start from f32-representable values.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = random_model(&mut rng, d, variant, attention);
        for kind in model.param_kinds() {
            model.param_mut(kind).mapv_inplace(|v| f64::from(v as f32));
        }
        let meta = serde_json::json!({"seed": seed});
        let mut buf = Vec::new();
        model.save(&mut buf, &meta).unwrap();
        let (back, back_meta) = ModelParams::load(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back_meta, meta);
        let mut again = Vec::new();
        back.save(&mut again, &serde_json::json!({"seed": seed})).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn spatial_map_file_round_trip(seed in any::<u64>(), n in 1usize..4, h in 1usize..4, w in 1usize..4, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_fn((n, h, w, d), |_| rng.random_range(-10.0f32..10.0));
        let set = SpatialMapSet::new((0..n).map(|i| format!("m{i}")).collect(), data).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = SpatialMapSet::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &set);
    }

    #[test]
    fn top_k_matches_brute_force(seed in any::<u64>(), n in 1usize..60, d in 1usize..6, exclude_self in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, n, d);
        let (query, exclude) = if exclude_self && n > 1 {
            let i = rng.random_range(0..n);
            (bank.row(i).to_vec(), Some(i))
        } else {
            ((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(), None)
        };
        let available = n - usize::from(exclude.is_some());
        let k = rng.random_range(1..=available);
        let fast = bank.top_k_neighbors(&query, k, exclude);
        prop_assume!(fast.is_ok());
        prop_assert_eq!(fast.unwrap(), knn_oracle(&bank, &query, k, exclude));
    }

    #[test]
    fn auroc_matches_pairwise_oracle(seed in any::<u64>(), n in 2usize..200, levels in 1u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 7.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let fast = auroc(&scores, &labels).unwrap();
        prop_assert_eq!(fast, pairwise_auroc_oracle(&scores, &labels).unwrap());
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        prop_assert_eq!(auroc(&squashed, &labels).unwrap(), fast);
    }

    #[test]
    fn linear_head_score_ignores_query_scale(seed in any::<u64>(), d in 2usize..8, scale in 0.1f32..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 12, d);
        let model = random_model(&mut rng, d, HeadVariant::Linear, true);
        let query: Vec<f32> = (0..d).map(|_| rng.random_range(0.1f32..1.0)).collect();
        let scaled: Vec<f32> = query.iter().map(|x| x * scale).collect();
        let a = anomaly_score(&model, &bank, &query, 4).unwrap();
        let b = anomaly_score(&model, &bank, &scaled, 4).unwrap();
        prop_assume!(!a.degenerate && !b.degenerate);
        prop_assert!((a.score - b.score).abs() < 1e-5);
    }
}
