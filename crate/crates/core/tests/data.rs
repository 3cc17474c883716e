use pdtr_core::checkpoint::{encode, load_checkpoint, restore, save_checkpoint};
use pdtr_core::data::augment::{augment, AugmentOp};
use pdtr_core::data::dataset::{load_dataset, save_dataset};
use pdtr_core::data::synth::{make_template, synth_dataset, synth_scene, SceneSpec};
use pdtr_core::data::{Annotation, GrayImage};
use pdtr_core::model::{Detector, ModelConfig};
use pdtr_core::{Error, SeededRng};
use proptest::prelude::*;

fn class_counts(spec: &SceneSpec, scenes: usize, seed: u64) -> [usize; 4] {
    let mut counts = [0; 4];
    for s in synth_dataset(spec, scenes, seed).unwrap() {
        for a in &s.record.annotations {
            counts[a.class_id] += 1;
        }
    }
    counts
}

#[test]
fn class_counts_follow_the_placement_probabilities() {
    let n = 1000;
    for (probs, seed) in [([0.5; 4], 1), ([0.1, 0.3, 0.6, 0.9], 2)] {
        let spec = SceneSpec {
            place_prob: probs,
            ..SceneSpec::default()
        };
        let counts = class_counts(&spec, n, seed);
        for (c, &p) in probs.iter().enumerate() {
            let mean = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let got = counts[c] as f64;
            assert!(
                (got - mean).abs() <= 3.0 * sigma,
                "class {c}: {got} vs {mean} ± {}",
                3.0 * sigma
            );
        }
    }
}

#[test]
fn datasets_are_reproducible_from_spec_and_seed() {
    let spec = SceneSpec::default();
    assert_eq!(synth_dataset(&spec, 5, 9).unwrap(), synth_dataset(&spec, 5, 9).unwrap());
    assert_ne!(
        synth_dataset(&spec, 5, 9).unwrap(),
        synth_dataset(&spec, 5, 10).unwrap()
    );
}

#[test]
fn impossible_placement_is_reported() {
    let spec = SceneSpec {
        width: 32,
        height: 32,
        place_prob: [1.0; 4],
        ..SceneSpec::default()
    };
    let failures = (0..200)
        .filter(|&s| matches!(synth_scene(&spec, s), Err(Error::Placement { .. })))
        .count();
    assert!(failures > 0, "{failures}");
}

#[test]
fn dataset_round_trip_is_exact_for_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset(&SceneSpec::default(), 10, 3).unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.record, b.record);
        for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn desk_checkpoint_is_small_and_round_trips() {
    let (_, store) = Detector::new::<f32>(&ModelConfig::desk(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.pdtr");
    save_checkpoint(&store, &p).unwrap();
    let size = std::fs::metadata(&p).unwrap().len();
    assert!(size < 20 * 1024 * 1024, "{size} bytes");
    assert!(size as usize >= 4 * store.num_scalars());
    let (_, mut other) = Detector::new::<f32>(&ModelConfig::desk(), 1).unwrap();
    load_checkpoint(&mut other, &p).unwrap();
    for (a, b) in store.iter().zip(other.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(encode(&other), std::fs::read(&p).unwrap());
}

#[test]
fn checkpoint_from_a_different_architecture_is_rejected() {
    let (_, store) = Detector::new::<f32>(&ModelConfig::desk(), 0).unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.head.num_queries += 1;
    let (_, mut other) = Detector::new::<f32>(&cfg, 0).unwrap();
    assert!(matches!(
        restore(&mut other, &encode(&store)),
        Err(Error::CheckpointShape { .. })
    ));
}

/// Binary image holding `mask` with its top-left corner at `(ox, oy)`.
fn paint(w: usize, h: usize, mask: &[bool], mw: usize, ox: usize, oy: usize) -> GrayImage {
    let mut img = GrayImage::filled(w, h, 0.0);
    for (i, &on) in mask.iter().enumerate() {
        if on {
            img.set(ox + i % mw, oy + i / mw, 1.0);
        }
    }
    img
}

fn tight(img: &GrayImage) -> [f64; 4] {
    let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) > 0.5 {
                b = [
                    b[0].min(x as f64),
                    b[1].min(y as f64),
                    b[2].max(x as f64 + 1.0),
                    b[3].max(y as f64 + 1.0),
                ];
            }
        }
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_transforms_match_the_rasterized_mask(
        seed in any::<u64>(),
        class in 0usize..4,
        w in 48usize..96,
        h in 48usize..96,
        rot in 0usize..4,
        flip in any::<bool>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let t = make_template(class, 1.0, &mut rng);
        prop_assume!(t.width < w && t.height < h);
        let ox = rng.below(w - t.width);
        let oy = rng.below(h - t.height);
        let mut img = paint(w, h, &t.mask, t.width, ox, oy);
        let mut anns = vec![Annotation { class_id: class, bbox: tight(&img) }];
        let mut ops = vec![AugmentOp::Rotate90; rot];
        if flip {
            ops.push(AugmentOp::HFlip);
        }
        ops.push(AugmentOp::GaussianBlur { sigma: 0.0 });
        for op in ops {
            (img, anns) = augment(&img, &anns, op);
            let raster = tight(&img);
            for (a, b) in raster.iter().zip(&anns[0].bbox) {
                prop_assert!((a - b).abs() <= 1.0, "{:?}: {:?} vs {:?}", op, raster, anns[0].bbox);
            }
        }
    }

    #[test]
    fn scenes_stay_in_range_with_boxes_inside(seed in any::<u64>()) {
        let (img, anns) = synth_scene(&SceneSpec::default(), seed).unwrap();
        prop_assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        for a in anns {
            let [x1, y1, x2, y2] = a.bbox;
            prop_assert!(0.0 <= x1 && x1 < x2 && x2 <= img.width as f64);
            prop_assert!(0.0 <= y1 && y1 < y2 && y2 <= img.height as f64);
        }
    }

    #[test]
    fn brightness_keeps_boxes_and_range(seed in any::<u64>(), factor in 0.8f64..1.2) {
        let (img, anns) = synth_scene(&SceneSpec::default(), seed).unwrap();
        let (out, b) = augment(&img, &anns, AugmentOp::Brightness { factor });
        prop_assert_eq!(b, anns);
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
