//! Box geometry, bipartite assignment and set-prediction losses.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::head::{DenoiseSet, HeadOutput};
use crate::tensor::{sigmoid, Real};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Box `(cx, cy, w, h)` to corners `(x1, y1, x2, y2)`.
pub fn to_corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Corners to `(cx, cy, w, h)`.
pub fn to_centre(c: [f64; 4]) -> [f64; 4] {
    [(c[0] + c[2]) / 2.0, (c[1] + c[3]) / 2.0, c[2] - c[0], c[3] - c[1]]
}

fn area(c: [f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// IoU of two corner boxes.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Generalised IoU of two corner boxes.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let i = intersection(a, b);
    let u = area(a) + area(b) - i;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull <= 0.0 {
        return 0.0;
    }
    let iou = if u <= 0.0 { 0.0 } else { i / u };
    iou - (hull - u) / hull
}

/// IoU of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_corners(to_corners(a), to_corners(b))
}

/// GIoU of two `(cx, cy, w, h)` boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    giou_corners(to_corners(a), to_corners(b))
}

// ------------------------------------------------------------ assignment

/// Matched `(prediction, ground truth)` pairs sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Sum of the matched entries of `cost`.
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(k, g)| cost[k][g]).sum()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
/// Returns the column of each row and the total cost.
fn solve_rows(cost: &[Vec<f64>], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let m = cols.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // shortest augmenting path with potentials, 1-based internal indexing
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][cols[j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[i][col_of[i]]).sum();
    (col_of, total)
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Optimal assignment of `K` predictions to `G ≤ K` ground truths.
///
/// `cost[k][g]` is the cost of prediction `k` taking ground truth `g`. Among
/// co-optimal assignments the lexicographically smallest sorted pair list is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let k = cost.len();
    let g = if k == 0 { 0 } else { cost[0].len() };
    if cost.iter().any(|r| r.len() != g) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    if g > k {
        return Err(Error::Dimension(format!("{g} ground truths for {k} predictions")));
    }
    // rows = ground truths, columns = predictions
    let t: Vec<Vec<f64>> = (0..g).map(|j| (0..k).map(|i| cost[i][j]).collect()).collect();
    let all: Vec<usize> = (0..k).collect();
    let (_, best) = solve_rows(&t, &all);

    let mut pairs = Vec::new();
    let mut fixed_cost = 0.0;
    let mut open_gts: Vec<usize> = (0..g).collect();
    for pred in 0..k {
        if open_gts.is_empty() {
            break;
        }
        let later: Vec<usize> = (pred + 1..k).collect();
        let mut chosen = None;
        for (pos, &gt) in open_gts.iter().enumerate() {
            let rest: Vec<Vec<f64>> = open_gts.iter().filter(|&&x| x != gt).map(|&x| t[x].clone()).collect();
            if rest.len() > later.len() {
                continue;
            }
            let (_, sub) = solve_rows(&rest, &later);
            if near(fixed_cost + cost[pred][gt] + sub, best) {
                chosen = Some(pos);
                break;
            }
        }
        if let Some(pos) = chosen {
            let gt = open_gts.remove(pos);
            fixed_cost += cost[pred][gt];
            pairs.push((pred, gt));
        }
    }
    let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let unmatched = (0..k).filter(|i| !matched.contains(i)).collect();
    Ok(Assignment { pairs, unmatched })
}

// ---------------------------------------------------------------- costs

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

pub const MATCH_COST: CostWeights = CostWeights {
    class: 2.0,
    l1: 5.0,
    giou: 2.0,
};

pub const LOSS_WEIGHTS: CostWeights = CostWeights {
    class: 1.0,
    l1: 5.0,
    giou: 2.0,
};

/// Focal-shaped classification cost of predicting probability `p` for the true class.
pub fn focal_class_cost(p: f64) -> f64 {
    let p = p.clamp(1e-8, 1.0 - 1e-8);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

/// `cost[k][g]` from class logits `[K][C]`, boxes `[K]` and ground truth.
pub fn match_cost(
    logits: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gt_boxes: &[[f64; 4]],
    gt_labels: &[usize],
    w: CostWeights,
) -> Vec<Vec<f64>> {
    logits
        .iter()
        .zip(boxes)
        .map(|(lg, b)| {
            gt_boxes
                .iter()
                .zip(gt_labels)
                .map(|(gb, &gl)| {
                    let l1: f64 = (0..4).map(|j| (b[j] - gb[j]).abs()).sum();
                    w.class * focal_class_cost(sigmoid(lg[gl])) + w.l1 * l1 + w.giou * (1.0 - giou(*b, *gb))
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------- losses

/// Loss terms as plain numbers for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossParts {
    pub fn add(&mut self, o: LossParts) {
        self.class += o.class;
        self.l1 += o.l1;
        self.giou += o.giou;
    }

    pub fn total(&self) -> f64 {
        self.class + self.l1 + self.giou
    }
}

/// Weighted focal + L1 + GIoU loss for rows `preds` supervised by ground truths
/// `gts`; all other rows of `logits` are background. Normalised by `norm`.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    boxes: NodeId,
    preds: &[usize],
    gts: &[usize],
    gt_boxes: &[[f64; 4]],
    gt_labels: &[usize],
    norm: f64,
) -> Result<(NodeId, LossParts)> {
    let n = g.value(logits).rows();
    let c = g.value(logits).last_dim();
    let mut target = vec![T::zero(); n * c];
    for (&p, &t) in preds.iter().zip(gts) {
        target[p * c + gt_labels[t]] = T::one();
    }
    let cls = g.focal_loss(logits, target, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let cls = g.scale(cls, LOSS_WEIGHTS.class / norm);
    let mut parts = LossParts {
        class: g.scalar(cls).f64(),
        ..Default::default()
    };
    if preds.is_empty() {
        return Ok((cls, parts));
    }
    let sel = g.select_rows(boxes, preds)?;
    let tb: Vec<T> = gts.iter().flat_map(|&t| gt_boxes[t].map(T::of)).collect();
    let l1 = g.l1_loss(sel, tb.clone())?;
    let l1 = g.scale(l1, LOSS_WEIGHTS.l1 / norm);
    let gi = g.giou_loss(sel, tb)?;
    let gi = g.scale(gi, LOSS_WEIGHTS.giou / norm);
    parts.l1 = g.scalar(l1).f64();
    parts.giou = g.scalar(gi).f64();
    let total = g.add_all(&[cls, l1, gi])?;
    Ok((total, parts))
}

/// Rows `lo..hi` of a node.
fn rows<T: Real>(g: &mut Graph<T>, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
    let idx: Vec<usize> = (lo..hi).collect();
    g.select_rows(x, &idx)
}

fn node_rows<T: Real>(g: &Graph<T>, x: NodeId) -> Vec<Vec<f64>> {
    let t = g.value(x);
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.f64()).collect())
        .collect()
}

/// Assignment of the final layer's matching queries to the ground truth.
pub fn assign_final<T: Real>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    gt_boxes: &[[f64; 4]],
    gt_labels: &[usize],
) -> Result<Assignment> {
    let k = out.num_matching;
    let last = out.logits.len() - 1;
    let lg = rows(g, out.logits[last], 0, k)?;
    let bx = rows(g, out.boxes[last], 0, k)?;
    let logits = node_rows(g, lg);
    let boxes: Vec<[f64; 4]> = node_rows(g, bx).into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
    if gt_boxes.is_empty() {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..k).collect(),
        });
    }
    hungarian_match(&match_cost(&logits, &boxes, gt_boxes, gt_labels, MATCH_COST))
}

/// Set loss over every decoder layer with the final layer's assignment,
/// normalised by the ground-truth count.
pub fn set_loss<T: Real>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    assignment: &Assignment,
    gt_boxes: &[[f64; 4]],
    gt_labels: &[usize],
) -> Result<(NodeId, LossParts)> {
    let k = out.num_matching;
    let norm = gt_boxes.len().max(1) as f64;
    let preds: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let gts: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    for (&lg, &bx) in out.logits.iter().zip(&out.boxes) {
        let lg = rows(g, lg, 0, k)?;
        let bx = rows(g, bx, 0, k)?;
        let (t, p) = supervised_loss(g, lg, bx, &preds, &gts, gt_boxes, gt_labels, norm)?;
        terms.push(t);
        parts.add(p);
    }
    Ok((g.add_all(&terms)?, parts))
}

/// Denoising loss with the fixed query → ground-truth correspondence,
/// normalised by the number of denoising queries.
pub fn denoising_loss<T: Real>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    dn: &DenoiseSet,
    gt_boxes: &[[f64; 4]],
    gt_labels: &[usize],
) -> Result<Option<(NodeId, LossParts)>> {
    if dn.is_empty() {
        return Ok(None);
    }
    let k = out.num_matching;
    let n = dn.len();
    let preds: Vec<usize> = (0..n).collect();
    let norm = n as f64;
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    for (&lg, &bx) in out.logits.iter().zip(&out.boxes) {
        let lg = rows(g, lg, k, k + n)?;
        let bx = rows(g, bx, k, k + n)?;
        let (t, p) = supervised_loss(g, lg, bx, &preds, &dn.target, gt_boxes, gt_labels, norm)?;
        terms.push(t);
        parts.add(p);
    }
    Ok(Some((g.add_all(&terms)?, parts)))
}
