use proptest::prelude::*;

use pvda_core::calibration::{
    calibrated_class_weight, cluster_weight, normalize_gamma, raw_class_weight, CalibrationConfig, CalibrationMode,
};
use pvda_core::clustering::{assigned_distances, kmeans_fit, kmeans_pp_init, lloyd_fit};
use pvda_core::data::{decode_dataset, encode_dataset, generate_domain_pair, mean_prototype_shift};
use pvda_core::model::{self, ClipPlan, LossInstance, ManParams, ModelShape};
use pvda_core::nn::{self, decode_checkpoint, encode_checkpoint, softmax, Parameters, Sgd};
use pvda_core::trainer::gamma_quality;
use pvda_core::{ArchConfig, DomainPairSpec};

fn small_arch() -> ArchConfig {
    ArchConfig {
        feature_dim: 3,
        extractor_hidden: vec![4],
        relation_hidden: vec![4],
        fused_dim: 3,
        classifier_hidden: vec![],
        discriminator_hidden: vec![3],
        max_clips_per_scale: 5,
        per_modality_relations: false,
    }
}

fn softmax_rows(rows: usize, classes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-6.0f64..6.0, classes), rows)
        .prop_map(|logits| logits.iter().map(|l| softmax(l)).collect())
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
}

fn spec_strategy() -> impl Strategy<Value = DomainPairSpec> {
    (3usize..7, 1usize..4, 2usize..5, 1usize..4, 0.0f64..3.0, 0.0f64..2.0, 0.2f64..2.0, any::<u64>()).prop_map(
        |(cs, frames, per, d, shift, aniso, sigma, seed)| {
            let ct = 1 + seed as usize % (cs - 1);
            DomainPairSpec {
                num_source_classes: cs,
                num_target_classes: ct,
                frames_per_sample: frames,
                modalities: 2,
                feature_dim: d,
                samples_per_source_class: per,
                target_class_counts: (0..ct).map(|c| 1 + (c + per) % 3).collect(),
                shift_magnitude: shift,
                shift_anisotropy: aniso,
                noise_sigma: sigma,
                seed,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn generator_is_deterministic_and_contained(spec in spec_strategy()) {
        let (s1, t1) = generate_domain_pair(&spec).unwrap();
        let (s2, t2) = generate_domain_pair(&spec).unwrap();
        prop_assert_eq!(&s1, &s2);
        prop_assert_eq!(&t1, &t2);
        prop_assert!(t1.labels().unwrap().iter().all(|&l| l < spec.num_target_classes));
        prop_assert!(s1.labels().unwrap().iter().all(|&l| l < spec.num_source_classes));
    }

    #[test]
    fn shift_is_monotone(spec in spec_strategy(), extra in 0.0f64..3.0) {
        let more = DomainPairSpec { shift_magnitude: spec.shift_magnitude + extra, ..spec.clone() };
        prop_assert!(mean_prototype_shift(&more).unwrap() >= mean_prototype_shift(&spec).unwrap() - 1e-12);
    }

    #[test]
    fn dataset_bytes_round_trip(spec in spec_strategy()) {
        let (s, t) = generate_domain_pair(&spec).unwrap();
        for d in [s, t] {
            let bytes = encode_dataset(&d).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), m in 1usize..3) {
        let shape = ModelShape { frames: 3, modalities: m, input_dim: 2, num_classes: 4 };
        let params = ManParams::new(&small_arch(), shape, 1.0, seed).unwrap();
        let bytes = encode_checkpoint(&params.tensors()).unwrap();
        let mut other = params.zeros_like();
        nn::load_into(&mut other, &decode_checkpoint(&bytes).unwrap()).unwrap();
        prop_assert_eq!(other.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_is_strictly_inside_for_moderate_logits(logits in prop::collection::vec(-10.0f64..10.0, 1..12)) {
        prop_assert!(softmax(&logits).iter().all(|&v| v > 0.0 && v < 1.0 || logits.len() == 1));
    }

    #[test]
    fn grl_is_identity_forward_and_scales_backward(x in prop::collection::vec(-5.0f64..5.0, 1..8), alpha in 0.0f64..3.0) {
        prop_assert_eq!(nn::grl_forward(&x), x.clone());
        let back = nn::grl_backward(&x, alpha);
        for (b, v) in back.iter().zip(&x) {
            prop_assert_eq!(*b, -alpha * v);
        }
    }

    #[test]
    fn one_training_step_is_deterministic(seed in 0u64..1000) {
        let inst = LossInstance::random(&small_arch(), ModelShape { frames: 2, modalities: 2, input_dim: 3, num_classes: 3 }, 2, seed).unwrap();
        let step = || {
            let mut p = inst.params.clone();
            let g = inst.loss(&p).unwrap().grads;
            Sgd::new(0.01, 0.9).step(&mut p, &g).unwrap();
            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(step(), step());
    }

    #[test]
    fn single_modality_objective_reduction(seed in 0u64..1000) {
        let shape = ModelShape { frames: 3, modalities: 1, input_dim: 3, num_classes: 3 };
        let mut inst = LossInstance::random(&small_arch(), shape, 3, seed).unwrap();
        inst.gamma = vec![1.0; 3];
        let src: Vec<_> = inst.source.iter().collect();
        let tgt: Vec<_> = inst.target.iter().collect();
        let reference = model::single_modality_objective(&inst.params, &src, &inst.labels, &tgt, &inst.gamma, &inst.plan).unwrap();
        prop_assert!((inst.loss(&inst.params).unwrap().objective - reference).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_additive_over_modalities(seed in 0u64..1000, frames in 2usize..6) {
        let shape = ModelShape { frames, modalities: 2, input_dim: 2, num_classes: 3 };
        let inst = LossInstance::random(&small_arch(), shape, 1, seed).unwrap();
        let params = &inst.params;
        let grid = model::extract_frame_features(params, &inst.source[0]).unwrap();
        let both = model::trn_fuse_with_plan(params, &grid, &inst.plan).unwrap();
        let mut one = params.clone();
        one.shape.modalities = 1;
        one.extractors.truncate(1);
        one.discriminators.truncate(1);
        let part = |m: usize| {
            let g: model::FrameGrid = grid.iter().map(|row| vec![row[m].clone()]).collect();
            model::trn_fuse_with_plan(&one, &g, &inst.plan).unwrap()
        };
        let (a, b) = (part(0), part(1));
        for i in 0..both.len() {
            prop_assert!((both[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_plans_follow_the_seed(seed in any::<u64>(), frames in 2usize..8, cap in 1usize..7) {
        let a = ClipPlan::from_seed(frames, cap, seed).unwrap();
        prop_assert_eq!(&a, &ClipPlan::from_seed(frames, cap, seed).unwrap());
        for r in 2..=frames {
            let clips = a.clips(r);
            prop_assert_eq!(clips.len() as u128, model::binomial(frames, r).min(cap as u128));
            for c in clips {
                prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn seeding_ignores_input_order(pts in points(40, 3), k in 1usize..8, seed in any::<u64>(), rot in 0usize..40) {
        let mut shuffled = pts.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let mut a = kmeans_pp_init(&pts, k, seed).unwrap();
        let mut b = kmeans_pp_init(&shuffled, k, seed).unwrap();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clustering_ignores_input_order(pts in points(60, 2), k in 1usize..6, seed in any::<u64>()) {
        let mut rev = pts.clone();
        rev.reverse();
        let a = kmeans_fit(&pts, k, seed, 300, 1e-9).unwrap();
        let b = kmeans_fit(&rev, k, seed, 300, 1e-9).unwrap();
        let members = |m: &pvda_core::ClusterModel, flip: bool| {
            let mut sets: Vec<(Vec<i64>, Vec<usize>)> = (0..m.k()).map(|c| {
                let ids = (0..pts.len()).filter(|&i| m.assignments[i] == c).map(|i| if flip { pts.len() - 1 - i } else { i }).collect::<Vec<_>>();
                let mut ids = ids; ids.sort();
                (m.centroids[c].iter().map(|v| (v * 1e6).round() as i64).collect(), ids)
            }).collect();
            sets.sort();
            sets
        };
        prop_assert_eq!(members(&a, false), members(&b, true));
    }

    #[test]
    fn scaling_scales_distances(pts in points(50, 3), k in 1usize..5, seed in any::<u64>(), c in 0.1f64..10.0) {
        let init = kmeans_pp_init(&pts, k, seed).unwrap();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
        let scaled_init: Vec<Vec<f64>> = init.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
        let a = lloyd_fit(&pts, &init, 100, 0.0).unwrap();
        let b = lloyd_fit(&scaled, &scaled_init, 100, 0.0).unwrap();
        prop_assert_eq!(&a.assignments, &b.assignments);
        for (x, y) in assigned_distances(&a, &pts).iter().zip(assigned_distances(&b, &scaled)) {
            prop_assert!((x * c * c - y).abs() <= 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn cluster_weight_is_bounded_and_monotone(mu in 0.0f64..10.0, sigma in 0.0f64..5.0, a in 0.0f64..6.0, b in 0.0f64..6.0,
                                              t1 in -5.0f64..20.0, t2 in -5.0f64..20.0) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (wl, wh) = (cluster_weight(lo, mu, sigma, a, b), cluster_weight(hi, mu, sigma, a, b));
        for w in [wl, wh] {
            prop_assert!(w >= a.min(b) && w <= a.max(b));
        }
        if a >= b { prop_assert!(wh <= wl); } else { prop_assert!(wh >= wl); }
        if sigma > 0.0 {
            prop_assert_eq!(cluster_weight(mu - sigma, mu, sigma, a, b), a);
            prop_assert_eq!(cluster_weight(mu + sigma, mu, sigma, a, b), b);
        }
    }

    #[test]
    fn calibrated_weights_are_nonnegative_and_mean_one(
        preds in softmax_rows(30, 6), feats in points(30, 4), beta in 0.0f64..3.0,
        a in 0.0f64..6.0, b in 0.0f64..6.0, k in 1usize..6, seed in any::<u64>(), normalized in any::<bool>()
    ) {
        let cfg = CalibrationConfig { beta, a, b, k, entropy_normalized: normalized, ..CalibrationConfig::default() };
        for mode in [CalibrationMode::Combined, CalibrationMode::EntropyOnly, CalibrationMode::ClusterOnly, CalibrationMode::Uncalibrated] {
            match calibrated_class_weight(&preds, &feats, &cfg, seed, mode) {
                Ok((w, diag)) => {
                    prop_assert!(diag.sample_weights.iter().all(|&x| x >= 0.0));
                    prop_assert!(w.raw.iter().chain(&w.normalized).all(|&x| x >= 0.0));
                    let mean = w.normalized.iter().sum::<f64>() / 6.0;
                    prop_assert!((mean - 1.0).abs() < 1e-12);
                    let again = calibrated_class_weight(&preds, &feats, &cfg, seed, mode).unwrap();
                    prop_assert_eq!(&again.0, &w);
                }
                Err(e) => prop_assert!(a.max(b) == 0.0 || beta == 0.0, "unexpected error {e}"),
            }
        }
    }

    #[test]
    fn constant_weights_reduce_exactly(preds in softmax_rows(25, 5), feats in points(25, 3), c in 0.01f64..10.0, k in 1usize..5, seed in any::<u64>()) {
        let plain = normalize_gamma(&raw_class_weight(&preds).unwrap()).unwrap();
        let cfg = CalibrationConfig { beta: 0.0, a: c, b: c, k, ..CalibrationConfig::default() };
        let (w, _) = calibrated_class_weight(&preds, &feats, &cfg, seed, CalibrationMode::Combined).unwrap();
        prop_assert_eq!(w.normalized, plain);
    }

    #[test]
    fn gamma_quality_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 6), split in 1usize..6) {
        prop_assume!(raw.iter().sum::<f64>() > 0.0);
        let truth: Vec<f64> = (0..6).map(|c| if c < split { 1.0 / split as f64 } else { 0.0 }).collect();
        let (outlier, l1) = gamma_quality(&raw, &truth).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&outlier));
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l1));
    }
}
