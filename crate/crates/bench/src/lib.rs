//! Fixtures shared by the criterion benches.

use pdtr_core::data::synth::{synth_dataset, SceneSpec};
use pdtr_core::data::Sample;
use pdtr_core::eval::{Detection, GroundTruthBox};
use pdtr_core::{SeededRng, Tensor};

/// Uniform `[rows, cols]` tensor in `[-1, 1)`.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = SeededRng::new(seed);
    let v = (0..rows * cols).map(|_| rng.range(-1.0, 1.0) as f32).collect();
    Tensor::new([rows, cols], v).expect("positive extent")
}

/// `k × g` matching cost in `[0, 10)`.
pub fn random_cost(k: usize, g: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..k).map(|_| (0..g).map(|_| rng.range(0.0, 10.0)).collect()).collect()
}

pub fn scenes(count: usize, seed: u64) -> Vec<Sample> {
    synth_dataset(&SceneSpec::default(), count, seed).expect("default scenes place")
}

/// Ground truth of `samples` plus jittered copies of it as detections.
pub fn jittered_detections(samples: &[Sample], seed: u64) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let mut rng = SeededRng::new(seed);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        for a in &s.record.annotations {
            gts.push(GroundTruthBox {
                image_id: s.record.id,
                class_id: a.class_id,
                bbox: a.bbox,
            });
            for _ in 0..5 {
                let b = a.bbox.map(|v| v + rng.range(-3.0, 3.0));
                dets.push(Detection {
                    image_id: s.record.id,
                    class_id: a.class_id,
                    bbox: [b[0].min(b[2] - 1.0), b[1].min(b[3] - 1.0), b[2], b[3]],
                    confidence: rng.uniform(),
                });
            }
        }
    }
    (dets, gts)
}
