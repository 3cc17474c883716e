use pdtr_core::eval::{Detection, EvalConfig, GroundTruthBox};
use pdtr_core::SeededRng;

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Outcome of the evaluation of one class at one threshold.
struct Outcome {
    /// Non-ignored detections in rank order, `true` for a hit.
    hits: Vec<bool>,
    positives: usize,
}

/// Ranks a class's detections, then walks them once, giving each the best
/// unused object of its image: in-range objects first, out-of-range ones
/// only as an excuse to ignore the detection.
fn outcome(dets: &[Detection], gts: &[GroundTruthBox], class: usize, t: f64, lo: f64, hi: f64) -> Outcome {
    let inside = |a: f64| a >= lo && a < hi;
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.class_id == class).collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
    let objects: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.class_id == class).collect();
    let mut taken = vec![false; objects.len()];
    let mut hits = Vec::new();
    for (_, d) in ranked {
        let mut choice: Option<usize> = None;
        for want_inside in [true, false] {
            let mut best_iou = -1.0;
            for (j, o) in objects.iter().enumerate() {
                if taken[j] || o.image_id != d.image_id || inside(area(o.bbox)) != want_inside {
                    continue;
                }
                let v = overlap(d.bbox, o.bbox);
                if v >= t && v > best_iou {
                    best_iou = v;
                    choice = Some(j);
                }
            }
            if choice.is_some() {
                break;
            }
        }
        match choice {
            Some(j) => {
                taken[j] = true;
                if inside(area(objects[j].bbox)) {
                    hits.push(true);
                }
            }
            None => {
                if inside(area(d.bbox)) {
                    hits.push(false);
                }
            }
        }
    }
    Outcome {
        hits,
        positives: objects.iter().filter(|o| inside(area(o.bbox))).count(),
    }
}

/// All-point AP as `(1/P)·Σ_{hits i} max_{j ≥ i} precision_j`.
fn all_point_ap(o: &Outcome) -> f64 {
    if o.positives == 0 {
        return 0.0;
    }
    let n = o.hits.len();
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0.0;
    for (i, &h) in o.hits.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        precision.push(tp / (i + 1) as f64);
    }
    let mut sum = 0.0;
    for i in 0..n {
        if o.hits[i] {
            sum += precision[i..].iter().cloned().fold(0.0, f64::max);
        }
    }
    sum / o.positives as f64
}

/// Top `cap` detections of every image by confidence, earlier entries first on ties.
fn keep_top(dets: &[Detection], cap: usize) -> Vec<Detection> {
    let mut kept = Vec::new();
    let mut images: Vec<usize> = dets.iter().map(|d| d.image_id).collect();
    images.sort_unstable();
    images.dedup();
    let mut chosen = vec![false; dets.len()];
    for img in images {
        let mut mine: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image_id == img).collect();
        mine.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        for &i in mine.iter().take(cap) {
            chosen[i] = true;
        }
    }
    for (i, d) in dets.iter().enumerate() {
        if chosen[i] {
            kept.push(*d);
        }
    }
    kept
}

fn average(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Class mean of the threshold-mean AP, restricted to areas in `[lo, hi)`.
fn class_mean_ap(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig, ts: &[f64], lo: f64, hi: f64) -> f64 {
    let mut per_class = Vec::new();
    for c in 0..cfg.num_classes {
        let mut aps = Vec::new();
        let mut present = true;
        for &t in ts {
            let o = outcome(dets, gts, c, t, lo, hi);
            if o.positives == 0 && o.hits.is_empty() {
                present = false;
                break;
            }
            aps.push(all_point_ap(&o));
        }
        if present {
            per_class.push(average(&aps).unwrap());
        }
    }
    average(&per_class).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub class_ap: Vec<Vec<Option<f64>>>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub map_small: f64,
    pub map_medium: f64,
    pub mar100: f64,
}

pub fn brute_force_report(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> OracleReport {
    let dets = keep_top(dets, cfg.max_detections);
    let ts = &cfg.iou_thresholds;
    let inf = f64::INFINITY;
    let class_ap = (0..cfg.num_classes)
        .map(|c| {
            ts.iter()
                .map(|&t| {
                    let o = outcome(&dets, gts, c, t, 0.0, inf);
                    (o.positives > 0 || !o.hits.is_empty()).then(|| all_point_ap(&o))
                })
                .collect()
        })
        .collect();
    let mut recalls = Vec::new();
    for c in 0..cfg.num_classes {
        let mut r = Vec::new();
        for &t in ts {
            let o = outcome(&dets, gts, c, t, 0.0, inf);
            if o.positives > 0 {
                r.push(o.hits.iter().filter(|&&h| h).count() as f64 / o.positives as f64);
            }
        }
        if let Some(m) = average(&r) {
            recalls.push(m);
        }
    }
    OracleReport {
        class_ap,
        map: class_mean_ap(&dets, gts, cfg, ts, 0.0, inf),
        map50: class_mean_ap(&dets, gts, cfg, &[0.5], 0.0, inf),
        map75: class_mean_ap(&dets, gts, cfg, &[0.75], 0.0, inf),
        map_small: class_mean_ap(&dets, gts, cfg, ts, 0.0, cfg.small_area),
        map_medium: class_mean_ap(&dets, gts, cfg, ts, cfg.small_area, cfg.medium_area),
        mar100: average(&recalls).unwrap_or(0.0),
    }
}

/// Random small scenario: a few images and classes, objects of all sizes,
/// detections near objects plus clutter, confidences with occasional ties.
pub fn random_scenario(seed: u64) -> (Vec<Detection>, Vec<GroundTruthBox>, EvalConfig) {
    let mut rng = SeededRng::new(seed);
    let classes = 1 + rng.below(3);
    let images = 1 + rng.below(3);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let side = |rng: &mut SeededRng| match rng.below(3) {
        0 => rng.range(8.0, 30.0),
        1 => rng.range(33.0, 90.0),
        _ => rng.range(98.0, 140.0),
    };
    let conf = |rng: &mut SeededRng| {
        if rng.bernoulli(0.3) {
            rng.below(4) as f64 / 4.0
        } else {
            rng.uniform()
        }
    };
    for img in 0..images {
        for _ in 0..rng.below(5) {
            let (w, h) = (side(&mut rng), side(&mut rng));
            let (x, y) = (rng.range(0.0, 100.0), rng.range(0.0, 100.0));
            let class_id = rng.below(classes);
            let bbox = [x, y, x + w, y + h];
            gts.push(GroundTruthBox {
                image_id: img,
                class_id,
                bbox,
            });
            for _ in 0..rng.below(3) {
                let j = |rng: &mut SeededRng, s: f64| rng.range(-0.25, 0.25) * s;
                let b = [
                    bbox[0] + j(&mut rng, w),
                    bbox[1] + j(&mut rng, h),
                    bbox[2] + j(&mut rng, w),
                    bbox[3] + j(&mut rng, h),
                ];
                let class_id = if rng.bernoulli(0.8) {
                    class_id
                } else {
                    rng.below(classes)
                };
                dets.push(Detection {
                    image_id: img,
                    class_id,
                    bbox: [b[0].min(b[2] - 1.0), b[1].min(b[3] - 1.0), b[2], b[3]],
                    confidence: conf(&mut rng),
                });
            }
        }
        for _ in 0..rng.below(4) {
            let (w, h) = (side(&mut rng), side(&mut rng));
            let (x, y) = (rng.range(0.0, 150.0), rng.range(0.0, 150.0));
            dets.push(Detection {
                image_id: img,
                class_id: rng.below(classes),
                bbox: [x, y, x + w, y + h],
                confidence: conf(&mut rng),
            });
        }
    }
    let cfg = EvalConfig {
        num_classes: classes,
        max_detections: if rng.bernoulli(0.3) { 1 + rng.below(4) } else { 100 },
        ..EvalConfig::default()
    };
    (dets, gts, cfg)
}
