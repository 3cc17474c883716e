//! Detection metrics: greedy matching, precision/recall curves, interpolated
//! AP, capped AR, class averaging and size buckets.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::iou_corners;

/// A scored detection; `bbox` is `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
    pub confidence: f64,
}

/// A ground-truth object; `bbox` is `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the interpolated curve at every distinct recall level.
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.01, …, 1.
    Point101,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: usize,
    pub num_classes: usize,
    /// Objects with area below this are small.
    pub small_area: f64,
    /// Objects with area in `[small_area, medium_area)` are medium.
    pub medium_area: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_detections: 100,
            num_classes: 4,
            small_area: 32.0 * 32.0,
            medium_area: 96.0 * 96.0,
            interpolation: Interpolation::AllPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("no IoU thresholds".into()));
        }
        let mut prev = 0.0;
        for &t in &self.iou_thresholds {
            if !(t > prev && t <= 1.0) {
                return Err(Error::Config("IoU thresholds must be ascending in (0, 1]".into()));
            }
            prev = t;
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Area range a metric is restricted to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

pub fn box_area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Outcome of one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Excluded from the metric (matched an out-of-range object, or is out of range itself).
    Ignored,
}

/// Matches detections (already sorted best first) to ground truth of one image and class.
///
/// Each detection takes the unused in-range object of highest IoU ≥ `t`; failing
/// that, an unused out-of-range one, which marks it ignored. Ties go to the lower object index.
pub fn greedy_match_ranged(dets: &[[f64; 4]], gts: &[[f64; 4]], t: f64, range: AreaRange) -> Vec<MatchFlag> {
    let in_range: Vec<bool> = gts.iter().map(|&g| range.contains(box_area(g))).collect();
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for pass in [true, false] {
                for (j, &g) in gts.iter().enumerate() {
                    if used[j] || in_range[j] != pass {
                        continue;
                    }
                    let v = iou_corners(d, g);
                    if v >= t && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    if in_range[j] {
                        MatchFlag::Tp
                    } else {
                        MatchFlag::Ignored
                    }
                }
                None if range.contains(box_area(d)) => MatchFlag::Fp,
                None => MatchFlag::Ignored,
            }
        })
        .collect()
}

/// `true` marks a true positive.
pub fn greedy_match(dets: &[[f64; 4]], gts: &[[f64; 4]], t: f64) -> Vec<bool> {
    greedy_match_ranged(dets, gts, t, AreaRange::ALL)
        .into_iter()
        .map(|f| f == MatchFlag::Tp)
        .collect()
}

/// `(recall, precision)` after each detection rank. Recall is 0 when `num_gt == 0`.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    flags
        .iter()
        .map(|&f| {
            if f {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// Interpolated precision at recall `r`: the best precision at any recall ≥ `r`.
fn interpolated(curve: &[(f64, f64)], r: f64) -> f64 {
    curve.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
}

/// All-point interpolated average precision.
pub fn ap_interpolated(curve: &[(f64, f64)]) -> f64 {
    // running maximum of precision from the right
    let mut env = vec![0.0; curve.len()];
    let mut m = 0.0f64;
    for i in (0..curve.len()).rev() {
        m = m.max(curve[i].1);
        env[i] = m;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev {
            ap += (r - prev) * env[i];
            prev = r;
        }
    }
    ap
}

/// 101-point sampled average precision.
pub fn ap_101(curve: &[(f64, f64)]) -> f64 {
    (0..=100).map(|i| interpolated(curve, i as f64 / 100.0)).sum::<f64>() / 101.0
}

pub fn average_precision(curve: &[(f64, f64)], mode: Interpolation) -> f64 {
    match mode {
        Interpolation::AllPoint => ap_interpolated(curve),
        Interpolation::Point101 => ap_101(curve),
    }
}

/// AP and recall of one class at one threshold, or `None` when the class has
/// neither objects nor detections.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub ap: f64,
    /// `None` when the class has no objects.
    pub recall: Option<f64>,
    pub curve: Vec<(f64, f64)>,
}

/// Detections kept per image: the `cap` most confident, ties to the lower index.
pub fn cap_detections(dets: &[Detection], cap: usize) -> Vec<Detection> {
    let mut by_image: Vec<(usize, usize)> = dets.iter().enumerate().map(|(i, d)| (d.image_id, i)).collect();
    by_image.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(
                dets[b.1]
                    .confidence
                    .partial_cmp(&dets[a.1].confidence)
                    .unwrap_or(Ordering::Equal),
            )
            .then(a.1.cmp(&b.1))
    });
    let mut keep = vec![false; dets.len()];
    let mut count = 0;
    let mut current = None;
    for (img, i) in by_image {
        if current != Some(img) {
            current = Some(img);
            count = 0;
        }
        if count < cap {
            keep[i] = true;
            count += 1;
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| *d).collect()
}

/// Evaluates one class at one threshold over all images.
pub fn evaluate_class(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    class: usize,
    t: f64,
    range: AreaRange,
    mode: Interpolation,
) -> Option<ClassResult> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let gts: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.class_id == class).collect();
    let num_gt = gts.iter().filter(|g| range.contains(box_area(g.bbox))).count();

    let mut images: Vec<usize> = order.iter().map(|&i| dets[i].image_id).collect();
    images.extend(gts.iter().map(|g| g.image_id));
    images.sort_unstable();
    images.dedup();
    let mut flag_of = vec![MatchFlag::Ignored; dets.len()];
    for img in images {
        let idx: Vec<usize> = order.iter().copied().filter(|&i| dets[i].image_id == img).collect();
        let boxes: Vec<[f64; 4]> = idx.iter().map(|&i| dets[i].bbox).collect();
        let gboxes: Vec<[f64; 4]> = gts.iter().filter(|g| g.image_id == img).map(|g| g.bbox).collect();
        for (&i, f) in idx.iter().zip(greedy_match_ranged(&boxes, &gboxes, t, range)) {
            flag_of[i] = f;
        }
    }
    let flags: Vec<bool> = order
        .iter()
        .filter(|&&i| flag_of[i] != MatchFlag::Ignored)
        .map(|&i| flag_of[i] == MatchFlag::Tp)
        .collect();
    if num_gt == 0 && flags.is_empty() {
        return None;
    }
    let curve = pr_curve(&flags, num_gt);
    let ap = if num_gt == 0 {
        0.0
    } else {
        average_precision(&curve, mode)
    };
    let recall = (num_gt > 0).then(|| flags.iter().filter(|&&f| f).count() as f64 / num_gt as f64);
    Some(ClassResult { ap, recall, curve })
}

/// AR over thresholds for one class: per threshold the best recall over
/// confidence cutoffs, which for a monotone curve is the recall of all kept detections.
pub fn ar_at(dets: &[Detection], gts: &[GroundTruthBox], class: usize, thresholds: &[f64], cap: usize) -> Option<f64> {
    let dets = cap_detections(dets, cap);
    let mut sum = 0.0;
    for &t in thresholds {
        let r = evaluate_class(&dets, gts, class, t, AreaRange::ALL, Interpolation::AllPoint)?;
        sum += r.recall?;
    }
    Some(sum / thresholds.len() as f64)
}

/// Precision/recall curve of one class at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub threshold: f64,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `[class][threshold]`; `None` for classes without objects or detections.
    pub class_ap: Vec<Vec<Option<f64>>>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub map_small: f64,
    pub map_medium: f64,
    pub mar100: f64,
    pub curves: Vec<PrCurve>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn validate_inputs(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> Result<()> {
    for d in dets {
        if d.class_id >= cfg.num_classes {
            return Err(Error::Input(format!("detection class {} out of range", d.class_id)));
        }
        if !d.confidence.is_finite() || d.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite detection".into()));
        }
    }
    for g in gts {
        if g.class_id >= cfg.num_classes {
            return Err(Error::Input(format!("ground-truth class {} out of range", g.class_id)));
        }
    }
    Ok(())
}

/// Class-mean over thresholds of AP restricted to `range`; classes without any
/// objects or detections are left out of the mean.
fn mean_ap(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig, thresholds: &[f64], range: AreaRange) -> f64 {
    let per_class = (0..cfg.num_classes).filter_map(|c| {
        let aps: Option<Vec<f64>> = thresholds
            .iter()
            .map(|&t| evaluate_class(dets, gts, c, t, range, cfg.interpolation).map(|r| r.ap))
            .collect();
        aps.and_then(mean)
    });
    mean(per_class).unwrap_or(0.0)
}

pub fn report(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    validate_inputs(dets, gts, cfg)?;
    let dets = cap_detections(dets, cfg.max_detections);
    let mut class_ap = Vec::new();
    let mut curves = Vec::new();
    for c in 0..cfg.num_classes {
        let mut row = Vec::new();
        for &t in &cfg.iou_thresholds {
            let r = evaluate_class(&dets, gts, c, t, AreaRange::ALL, cfg.interpolation);
            row.push(r.as_ref().map(|r| r.ap));
            if let Some(r) = r {
                curves.push(PrCurve {
                    class_id: c,
                    threshold: t,
                    points: r.curve,
                });
            }
        }
        class_ap.push(row);
    }
    let map = mean(
        class_ap
            .iter()
            .filter_map(|row| row.iter().copied().collect::<Option<Vec<f64>>>().and_then(mean)),
    )
    .unwrap_or(0.0);
    let small = AreaRange {
        lo: 0.0,
        hi: cfg.small_area,
    };
    let medium = AreaRange {
        lo: cfg.small_area,
        hi: cfg.medium_area,
    };
    let mar100 =
        mean((0..cfg.num_classes).filter_map(|c| ar_at(&dets, gts, c, &cfg.iou_thresholds, cfg.max_detections)))
            .unwrap_or(0.0);
    Ok(EvalReport {
        class_ap,
        map,
        map50: mean_ap(&dets, gts, cfg, &[0.5], AreaRange::ALL),
        map75: mean_ap(&dets, gts, cfg, &[0.75], AreaRange::ALL),
        map_small: mean_ap(&dets, gts, cfg, &cfg.iou_thresholds, small),
        map_medium: mean_ap(&dets, gts, cfg, &cfg.iou_thresholds, medium),
        mar100,
        curves,
    })
}

impl EvalReport {
    /// Flat `key = value` text.
    pub fn to_text(&self, cfg: &EvalConfig) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("mAP", self.map),
            ("mAP50", self.map50),
            ("mAP75", self.map75),
            ("mAP_S", self.map_small),
            ("mAP_M", self.map_medium),
            ("mAR100", self.mar100),
        ] {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        for (c, row) in self.class_ap.iter().enumerate() {
            for (t, ap) in cfg.iou_thresholds.iter().zip(row) {
                match ap {
                    Some(ap) => {
                        let _ = writeln!(s, "AP.class{c}.iou{t:.2} = {ap:.6}");
                    }
                    None => {
                        let _ = writeln!(s, "AP.class{c}.iou{t:.2} = none");
                    }
                }
            }
        }
        s
    }

    /// CSV with columns `class,threshold,rank,recall,precision`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("class,threshold,rank,recall,precision\n");
        for c in &self.curves {
            for (rank, (r, p)) in c.points.iter().enumerate() {
                let _ = writeln!(s, "{},{:.2},{},{r:.6},{p:.6}", c.class_id, c.threshold, rank + 1);
            }
        }
        s
    }
}
