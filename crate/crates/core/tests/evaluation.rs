mod oracles;

use oracles::evaluation::{brute_force_report, random_scenario};
use pdtr_core::eval::{
    ap_interpolated, evaluate_class, pr_curve, report, AreaRange, Detection, EvalConfig, GroundTruthBox, Interpolation,
};
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn report_matches_brute_force_evaluator() {
    let mut nontrivial = 0;
    for seed in 0..80 {
        let (dets, gts, cfg) = random_scenario(seed);
        let r = report(&dets, &gts, &cfg).unwrap();
        let o = brute_force_report(&dets, &gts, &cfg);
        for (k, a, b) in [
            ("mAP", r.map, o.map),
            ("mAP50", r.map50, o.map50),
            ("mAP75", r.map75, o.map75),
            ("mAP_S", r.map_small, o.map_small),
            ("mAP_M", r.map_medium, o.map_medium),
            ("mAR100", r.mar100, o.mar100),
        ] {
            assert!(close(a, b), "seed {seed} {k}: {a} vs {b}");
        }
        assert_eq!(r.class_ap.len(), o.class_ap.len());
        for (x, y) in r.class_ap.iter().flatten().zip(o.class_ap.iter().flatten()) {
            match (x, y) {
                (Some(x), Some(y)) => assert!(close(*x, *y), "seed {seed}: {x} vs {y}"),
                (None, None) => {}
                _ => panic!("seed {seed}: presence differs"),
            }
        }
        if r.map > 0.0 && r.map < 1.0 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial >= 30, "only {nontrivial} scenarios with intermediate mAP");
}

#[test]
fn hand_curve_and_class_mean() {
    assert_eq!(ap_interpolated(&[(0.5, 1.0), (1.0, 0.5)]), 0.75);
    // class 0 perfect, class 1 below 1, class 2 has nothing and is skipped
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5],
        num_classes: 3,
        ..EvalConfig::default()
    };
    let b1 = [0.0, 0.0, 10.0, 10.0];
    let b2 = [20.0, 20.0, 30.0, 30.0];
    let gts = vec![
        GroundTruthBox {
            image_id: 0,
            class_id: 0,
            bbox: b1,
        },
        GroundTruthBox {
            image_id: 0,
            class_id: 1,
            bbox: b1,
        },
        GroundTruthBox {
            image_id: 0,
            class_id: 1,
            bbox: b2,
        },
    ];
    let det = |class_id, bbox, confidence| Detection {
        image_id: 0,
        class_id,
        bbox,
        confidence,
    };
    let dets = vec![
        det(0, b1, 0.9),
        det(1, b1, 0.8),
        det(1, [50.0, 50.0, 60.0, 60.0], 0.7),
        det(1, b2, 0.6),
    ];
    let r = report(&dets, &gts, &cfg).unwrap();
    // class 1 curve: (0.5, 1), (0.5, 0.5), (1, 2/3) → 0.5·1 + 0.5·2/3
    let ap1 = 0.5 + 0.5 * (2.0 / 3.0);
    assert_eq!(r.class_ap[0][0], Some(1.0));
    assert!((r.class_ap[1][0].unwrap() - ap1).abs() < 1e-15);
    assert_eq!(r.class_ap[2][0], None);
    assert!((r.map - (1.0 + ap1) / 2.0).abs() < 1e-15);
}

#[test]
fn detections_without_objects_score_zero() {
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5],
        num_classes: 2,
        ..EvalConfig::default()
    };
    let gts = vec![GroundTruthBox {
        image_id: 0,
        class_id: 0,
        bbox: [0.0, 0.0, 10.0, 10.0],
    }];
    let dets = vec![
        Detection {
            image_id: 0,
            class_id: 0,
            bbox: [0.0, 0.0, 10.0, 10.0],
            confidence: 0.5,
        },
        Detection {
            image_id: 0,
            class_id: 1,
            bbox: [0.0, 0.0, 10.0, 10.0],
            confidence: 0.5,
        },
    ];
    let r = report(&dets, &gts, &cfg).unwrap();
    assert_eq!(r.class_ap[1][0], Some(0.0));
    assert_eq!(r.map, 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_bounded_and_recall_never_drops(seed in 0u64..1_000_000) {
        let (dets, gts, cfg) = random_scenario(seed);
        let r = report(&dets, &gts, &cfg).unwrap();
        for v in [r.map, r.map50, r.map75, r.map_small, r.map_medium, r.mar100] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for c in &r.curves {
            for w in c.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0);
            }
            for p in &c.points {
                prop_assert!((0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1));
            }
        }
    }

    #[test]
    fn monotone_confidence_rescaling_changes_nothing(seed in 0u64..1_000_000, a in 0.1f64..5.0) {
        let (dets, gts, cfg) = random_scenario(seed);
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { confidence: (a * d.confidence).tanh() * 0.5 + 0.25, ..*d })
            .collect();
        prop_assert_eq!(report(&dets, &gts, &cfg).unwrap(), report(&squashed, &gts, &cfg).unwrap());
    }

    #[test]
    fn a_new_true_positive_never_lowers_ap(seed in 0u64..1_000_000, pick in 0usize..100, conf in 0.0f64..1.0) {
        let (dets, gts, _) = random_scenario(seed);
        prop_assume!(!gts.is_empty());
        let target = gts[pick % gts.len()];
        let t = 0.5;
        let before = evaluate_class(&dets, &gts, target.class_id, t, AreaRange::ALL, Interpolation::AllPoint).unwrap();
        let mut more = dets.clone();
        more.push(Detection { image_id: target.image_id, class_id: target.class_id, bbox: target.bbox, confidence: conf });
        let after = evaluate_class(&more, &gts, target.class_id, t, AreaRange::ALL, Interpolation::AllPoint).unwrap();
        // the object was unclaimed, so the new detection is a hit and nothing else changes
        prop_assume!(after.recall.unwrap() > before.recall.unwrap());
        let before = before.ap;
        prop_assert!(after.ap >= before - 1e-12, "{} < {}", after.ap, before);
    }

    #[test]
    fn curve_tracks_counts(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = flags.iter().filter(|&&f| f).count();
        let n = tp + extra;
        let c = pr_curve(&flags, n);
        prop_assert_eq!(c.len(), flags.len());
        if let Some(&(r, _)) = c.last() {
            if n > 0 {
                prop_assert!((r - tp as f64 / n as f64).abs() < 1e-15);
            }
        }
        let ap = ap_interpolated(&c);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }
}
