use compseg_core::baselines::{mc_dropout_predict, DropoutEnsemble};
use compseg_core::compensation::compensated_probabilities;
use compseg_core::evalkit::{auc, confusion, correction_curve, default_r_grid, oracle_curve, CorrectionCurve};
use compseg_core::inference::{bias_induced_predict, predict, BetaSource, InductionSpec, Relaxation};
use compseg_core::netcore::ModelShape;
use compseg_core::synthgrid::{corrupt_labels, generate_scene, AmbiguousPair, PairOrientation};
use compseg_core::uncertainty::{error_likelihood, sigma_sq};
use compseg_core::{ClassMatrix, FeatureGrid, LabelGrid, SceneConfig, SegModel};
use proptest::prelude::*;

fn grid(h: usize, w: usize, k: u8) -> impl Strategy<Value = LabelGrid> {
    prop::collection::vec(0..k, h * w).prop_map(move |v| LabelGrid::new(h, w, v).unwrap())
}

fn matrix(k: usize, range: f64) -> impl Strategy<Value = ClassMatrix> {
    prop::collection::vec(-range..range, k * k).prop_map(move |v| ClassMatrix::from_flat(k, v).unwrap())
}

fn features(h: usize, w: usize, d: usize) -> impl Strategy<Value = FeatureGrid> {
    prop::collection::vec(-1.0f64..1.0, h * w * d).prop_map(move |v| FeatureGrid::new(h, w, d, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_only_promotes_inferior_pixels(labels in grid(12, 12, 4), n in 0usize..6, sup in 0usize..4, step in 1usize..4) {
        let o = PairOrientation { superior: sup, inferior: (sup + step) % 4 };
        let small = corrupt_labels(&labels, &[o], n, 4).unwrap();
        let large = corrupt_labels(&labels, &[o], n + 1, 4).unwrap();
        for ((&orig, &a), &b) in labels.values().iter().zip(small.values()).zip(large.values()) {
            if a != orig {
                prop_assert_eq!(usize::from(orig), o.inferior);
                prop_assert_eq!(usize::from(a), o.superior);
                prop_assert_eq!(b, a);
            }
        }
    }

    #[test]
    fn scenes_are_valid_and_deterministic(seed in any::<u64>(), index in 0usize..50, regions in 1usize..12) {
        let cfg = SceneConfig {
            height: 10,
            width: 9,
            feature_dim: 5,
            num_classes: 4,
            num_regions: regions,
            ambiguous_pairs: vec![AmbiguousPair { class_a: 2, class_b: 3, similarity: 0.9 }],
            noise_std: 0.2,
            boundary_mix_width: 1,
            seed,
        };
        let (f, l) = generate_scene(&cfg, index).unwrap();
        prop_assert!(l.values().iter().all(|&c| c < 4));
        prop_assert!(f.values().iter().all(|v| v.is_finite()));
        prop_assert_eq!(generate_scene(&cfg, index).unwrap(), (f, l));
    }

    #[test]
    fn lowering_an_entry_lowers_that_probability(
        l in prop::collection::vec(-5.0f64..5.0, 4),
        b in matrix(4, 3.0),
        beta in 0.05f64..1.0,
        i in 0usize..4,
        gt in 0usize..4,
        delta in 0.1f64..3.0,
    ) {
        let mut lower = b.clone();
        lower.add(i, gt, -delta);
        let p = compensated_probabilities(&l, &b, beta, gt).unwrap();
        let q = compensated_probabilities(&l, &lower, beta, gt).unwrap();
        prop_assert!(q[i] < p[i]);
    }

    #[test]
    fn variance_vanishes_without_compensation(l in prop::collection::vec(-5.0f64..5.0, 5), b in matrix(5, 4.0), k in 1usize..=5, beta in 0.0f64..1.0) {
        prop_assert_eq!(sigma_sq(&l, &b, 0.0, k).unwrap(), 0.0);
        prop_assert_eq!(sigma_sq(&l, &ClassMatrix::zeros(5), beta, k).unwrap(), 0.0);
        let e = error_likelihood(&l, &b, beta, k, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn variance_is_permutation_equivariant(l in prop::collection::vec(-3.0f64..3.0, 4), b in matrix(4, 3.0), beta in 0.0f64..1.0, k in 1usize..=4, shift in 1usize..4) {
        // Distinct logits keep the top-k set free of index tie-breaks.
        let l: Vec<f64> = l.iter().enumerate().map(|(i, v)| v + i as f64 * 1e-3).collect();
        let perm = |i: usize| (i + shift) % 4;
        let mut pl = vec![0.0; 4];
        let mut pb = ClassMatrix::zeros(4);
        for i in 0..4 {
            pl[perm(i)] = l[i];
            for j in 0..4 {
                pb.set(perm(i), perm(j), b.get(i, j));
            }
        }
        let a = sigma_sq(&l, &b, beta, k).unwrap();
        let c = sigma_sq(&pl, &pb, beta, k).unwrap();
        prop_assert!((a - c).abs() <= 1e-12, "{} vs {}", a, c);
    }

    #[test]
    fn oracle_dominates_and_curves_rise(preds in grid(6, 6, 3), gts in grid(6, 6, 3), u in prop::collection::vec(0.0f64..1.0, 36)) {
        let r = default_r_grid();
        let curve = correction_curve(&[preds.clone()], &[gts.clone()], &[u.clone()], &r).unwrap();
        let squared: Vec<f64> = u.iter().map(|v| v * v).collect();
        let rescaled = correction_curve(&[preds.clone()], &[gts.clone()], &[squared], &r).unwrap();
        let oracle = oracle_curve(&[preds], &[gts], &r).unwrap();
        prop_assert_eq!(&curve, &rescaled);
        prop_assert!(curve.points.windows(2).all(|w| w[1].1 >= w[0].1));
        for (c, o) in curve.points.iter().zip(&oracle.points) {
            prop_assert!(o.1 >= c.1);
        }
        prop_assert!(auc(&oracle).unwrap() >= auc(&curve).unwrap());
    }

    #[test]
    fn auc_of_a_constant_is_the_constant(c in 0.0f64..1.0) {
        let curve = CorrectionCurve { points: default_r_grid().into_iter().map(|r| (r, c)).collect() };
        prop_assert!((auc(&curve).unwrap() - c).abs() <= 1e-12);
    }

    #[test]
    fn confusion_margins_count_pixels(preds in grid(7, 5, 5), gts in grid(7, 5, 5)) {
        let conf = confusion(&[preds.clone()], &[gts.clone()], 5).unwrap();
        prop_assert_eq!(conf.total(), 35);
        for c in 0..5 {
            prop_assert_eq!(conf.gt_count(c), gts.values().iter().filter(|&&v| usize::from(v) == c).count() as u64);
            prop_assert_eq!(conf.pred_count(c), preds.values().iter().filter(|&&v| usize::from(v) == c).count() as u64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn induced_inference_properties(f in features(5, 5, 4), seed in any::<u64>(), class in 0usize..3, boost in 0.1f64..20.0) {
        let model = SegModel::new(ModelShape::new(4, 6, 3), 0.0, seed).unwrap();
        let plain = predict(&model, &f).unwrap();
        prop_assert!(plain.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        for relaxation in [Relaxation::Soft, Relaxation::Hard] {
            let zero = InductionSpec::new(ClassMatrix::zeros(3), relaxation, BetaSource::Branch).unwrap();
            prop_assert_eq!(&bias_induced_predict(&model, &f, &zero).unwrap(), &plain.labels);
        }
        let mut small = ClassMatrix::zeros(3);
        small.set(class, class, boost);
        let mut large = small.clone();
        large.set(class, class, boost * 2.0);
        let at = |m: ClassMatrix| {
            let spec = InductionSpec::new(m, Relaxation::Soft, BetaSource::One).unwrap();
            bias_induced_predict(&model, &f, &spec).unwrap()
        };
        let (a, b) = (at(small), at(large));
        for (&x, &y) in a.values().iter().zip(b.values()) {
            if usize::from(x) == class {
                prop_assert_eq!(usize::from(y), class);
            }
        }
    }

    #[test]
    fn dropout_variance_is_non_negative(f in features(4, 4, 4), seed in any::<u64>(), rate in 0.0f64..0.6) {
        let model = SegModel::new(ModelShape::new(4, 6, 3), 0.0, seed).unwrap();
        let ens = DropoutEnsemble { rate, num_samples: 5, seed };
        let mc = mc_dropout_predict(&model, &f, &ens).unwrap();
        prop_assert!(mc.variance.iter().all(|&v| v >= 0.0));
        if rate == 0.0 {
            prop_assert!(mc.variance.iter().all(|&v| v == 0.0));
        }
    }
}
