//! Finite-difference verification of analytic gradients in 64-bit.
//!
//! Each module is run on toy shapes with perturbed parameters and reduced to
//! a scalar by a fixed random projection. Sampled entries of every parameter
//! and input are compared against central differences.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::autograd::{Graph, NodeId};
use crate::backbone::{DcftConfig, DcftLayer};
use crate::error::Result;
use crate::head::{
    denoise_mask, make_denoising_queries, DualHead, HeadConfig, HeadOutput, Memory, ModCross, QueryInput,
};
use crate::matching::{denoising_loss, set_loss, Assignment};
use crate::neck::{cell_centres, position_table, DeformAttn, DeformConfig};
use crate::nn::Builder;
use crate::param::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-4;

pub const MODULES: [&str; 5] = [
    "dcft_layer",
    "deformable_attention",
    "modulated_cross_attention",
    "dual_head_stack",
    "set_loss",
];

type Forward = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId>>;

/// A scalar function of a parameter store and some input tensors.
pub struct Case {
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

/// Worst agreement seen for one module.
#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub module: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl RowResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<RowResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(RowResult::passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>8}  result\n", "module", "max_rel_err", "entries");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>12.3e} {:>8}  {}",
                r.module,
                r.max_rel_err,
                r.entries,
                if r.passed() { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: Vec<u64>,
    /// Entries sampled per tensor.
    pub samples: usize,
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            samples: 6,
            corrupt_backward: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `Σ x ⊙ R` with `R` drawn from `salt`, scaled so the result is O(1).
pub fn probe(g: &mut Graph<f64>, x: NodeId, salt: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SeededRng::derive(0x5052_4f42, salt);
    let s = 1.0 / (n as f64).sqrt();
    let w: Vec<f64> = (0..n).map(|_| rng.normal() * s).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn evaluate(case: &Case, store: &ParamStore<f64>, inputs: &[Tensor<f64>], frozen: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    g.freeze_detached(frozen.to_vec());
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(&mut g, store, &ids)?;
    g.check()?;
    Ok(g.scalar(out))
}

fn sample_indices(rng: &mut SeededRng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..k).map(|_| rng.below(n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Largest relative error over sampled entries and the number of entries compared.
pub fn check_case(case: &Case, samples: usize, seed: u64, corrupt: bool) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    g.set_corrupt_backward(corrupt);
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(&mut g, &case.store, &ids)?;
    g.check()?;
    let frozen = g.detached_values();
    let grads = g.backward(out)?;
    let mut param_grad: Vec<Option<Vec<f64>>> = vec![None; case.store.len()];
    for (pid, node) in g.params() {
        param_grad[pid] = grads.get(node).map(<[f64]>::to_vec);
    }
    let input_grad: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| grads.get(id).map(<[f64]>::to_vec)).collect();

    let mut rng = SeededRng::derive(seed, 0x4743);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut store = case.store.clone();
    for pid in 0..store.len() {
        let n = store.get(pid).value.numel();
        for i in sample_indices(&mut rng, n, samples) {
            let orig = store.get(pid).value.data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + STEP;
            let up = evaluate(case, &store, &case.inputs, &frozen)?;
            store.get_mut(pid).value.data_mut()[i] = orig - STEP;
            let down = evaluate(case, &store, &case.inputs, &frozen)?;
            store.get_mut(pid).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = param_grad[pid].as_ref().map_or(0.0, |v| v[i]);
            worst = worst.max(relative_error(analytic, numeric));
            count += 1;
        }
    }
    let mut inputs = case.inputs.clone();
    for j in 0..inputs.len() {
        for i in sample_indices(&mut rng, inputs[j].numel(), samples) {
            let orig = inputs[j].data()[i];
            inputs[j].data_mut()[i] = orig + STEP;
            let up = evaluate(case, &case.store, &inputs, &frozen)?;
            inputs[j].data_mut()[i] = orig - STEP;
            let down = evaluate(case, &case.store, &inputs, &frozen)?;
            inputs[j].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = input_grad[j].as_ref().map_or(0.0, |v| v[i]);
            worst = worst.max(relative_error(analytic, numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect()).expect("shape matches data")
}

/// Moves every parameter off its initial value.
fn jitter(store: &mut ParamStore<f64>, rng: &mut SeededRng, std: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.normal() * std;
        }
    }
}

fn unit_boxes(rng: &mut SeededRng, n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            [
                rng.range(0.2, 0.8),
                rng.range(0.2, 0.8),
                rng.range(0.1, 0.4),
                rng.range(0.1, 0.4),
            ]
        })
        .collect()
}

pub fn dcft_layer_case(seed: u64) -> Result<Case> {
    let cfg = DcftConfig {
        window: 3,
        pool_sizes: vec![1, 2, 4],
        region_sizes: vec![3, 3, 2],
        mlp_ratio: 2,
        ..DcftConfig::desk()
    };
    let (h, w, c, heads) = (12, 12, 8, 2);
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let layer = DcftLayer::build(&mut Builder::new(&mut store, &mut rng), &cfg, c, heads)?;
    jitter(&mut store, &mut rng, 0.05);
    let x = random_tensor(&mut rng, &[h * w, c], 1.0);
    Ok(Case {
        store,
        inputs: vec![x],
        forward: Box::new(move |g, store, ids| {
            let y = layer.forward(g, store, &cfg, ids[0], h, w)?;
            probe(g, y, 1)
        }),
    })
}

pub fn deformable_attention_case(seed: u64) -> Result<Case> {
    let cfg = DeformConfig {
        dim: 8,
        heads: 2,
        points: 2,
        levels: 3,
        ..DeformConfig::desk()
    };
    let levels = vec![(4, 4), (2, 2), (1, 1)];
    let tokens: usize = levels.iter().map(|(h, w)| h * w).sum();
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let attn = DeformAttn::build(&mut Builder::new(&mut store, &mut rng), &cfg)?;
    jitter(&mut store, &mut rng, 0.1);
    let q = 5;
    let refs: Vec<(f64, f64)> = (0..q).map(|_| (rng.range(0.05, 0.95), rng.range(0.05, 0.95))).collect();
    let query = random_tensor(&mut rng, &[q, cfg.dim], 1.0);
    let source = random_tensor(&mut rng, &[tokens, cfg.dim], 1.0);
    Ok(Case {
        store,
        inputs: vec![query, source],
        forward: Box::new(move |g, store, ids| {
            let parts = attn.forward(g, store, ids[0], &refs, ids[1], &levels)?;
            probe(g, parts.out, 2)
        }),
    })
}

fn toy_head_config() -> HeadConfig {
    HeadConfig {
        dim: 8,
        num_queries: 3,
        num_classes: 4,
        layers: 2,
        ffn_dim: 16,
        dn_groups: 2,
        ..HeadConfig::desk()
    }
}

pub fn modulated_cross_attention_case(seed: u64) -> Result<Case> {
    let hc = toy_head_config();
    let d = hc.dim;
    let (mh, mw) = (3, 4);
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let ca = ModCross::build(&mut Builder::new(&mut store, &mut rng), d)?;
    jitter(&mut store, &mut rng, 0.1);
    let anchors = unit_boxes(&mut rng, 4);
    let content = random_tensor(&mut rng, &[anchors.len(), d], 1.0);
    let features = random_tensor(&mut rng, &[mh * mw, d], 1.0);
    let key_pos: Tensor<f64> = position_table(&cell_centres(mh, mw), d / 2, hc.temperature, hc.pos_scale);
    Ok(Case {
        store,
        inputs: vec![content, features],
        forward: Box::new(move |g, store, ids| {
            let kp = g.constant(key_pos.clone());
            let mem = Memory {
                features: ids[1],
                key_pos: kp,
            };
            let parts = ca.forward(g, store, ids[0], &anchors, mem, hc.temperature, hc.pos_scale)?;
            probe(g, parts.out, 3)
        }),
    })
}

/// Full dual-head stack with denoising queries and their blocking mask.
pub fn dual_head_case(seed: u64) -> Result<Case> {
    let hc = toy_head_config();
    let d = hc.dim;
    let (mh, mw) = (4, 4);
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let head = DualHead::build(&mut Builder::new(&mut store, &mut rng), &hc)?;
    jitter(&mut store, &mut rng, 0.05);
    let gt = unit_boxes(&mut rng, 2);
    let dn = make_denoising_queries(&gt, &[1, 3], hc.num_classes, hc.dn_groups, (0.4, 0.4, 0.4), &mut rng);
    let k = hc.num_queries;
    let mask = Rc::new(denoise_mask(k, &dn));
    let mut anchors = unit_boxes(&mut rng, k);
    anchors.extend(dn.boxes.iter().copied());
    let logits: Vec<f64> = anchors.iter().flatten().map(|&v| (v / (1.0 - v)).ln()).collect();
    let anchor_logits = Tensor::new([anchors.len(), 4], logits)?;
    let content = random_tensor(&mut rng, &[k, d], 1.0);
    let features = random_tensor(&mut rng, &[mh * mw, d], 1.0);
    let key_pos: Tensor<f64> = position_table(&cell_centres(mh, mw), d / 2, hc.temperature, hc.pos_scale);
    Ok(Case {
        store,
        inputs: vec![content, features],
        forward: Box::new(move |g, store, ids| {
            let dc = head.denoise_content(g, store, &dn.labels)?;
            let content = g.concat_rows(&[ids[0], dc])?;
            let al = g.constant(anchor_logits.clone());
            let kp = g.constant(key_pos.clone());
            let q = QueryInput {
                content,
                anchor_logits: al,
                mask: Some(mask.clone()),
                num_matching: k,
            };
            let out = head.forward(
                g,
                store,
                &q,
                Memory {
                    features: ids[1],
                    key_pos: kp,
                },
            )?;
            let mut terms = Vec::new();
            for (i, (&b, &l)) in out.boxes.iter().zip(&out.logits).enumerate() {
                terms.push(probe(g, b, 10 + i as u64)?);
                terms.push(probe(g, l, 20 + i as u64)?);
            }
            g.add_all(&terms)
        }),
    })
}

/// Matched and denoising losses over two decoder layers with a fixed assignment.
pub fn set_loss_case(seed: u64) -> Result<Case> {
    let mut rng = SeededRng::new(seed);
    let (k, classes, layers) = (5, 4, 2);
    let gt_boxes = unit_boxes(&mut rng, 3);
    let gt_labels = vec![0, 2, 2];
    let dn = make_denoising_queries(&gt_boxes, &gt_labels, classes, 2, (0.4, 0.4, 0.4), &mut rng);
    let n = k + dn.len();
    let assignment = Assignment {
        pairs: vec![(0, 2), (3, 0), (4, 1)],
        unmatched: vec![1, 2],
    };
    let mut inputs = Vec::new();
    for _ in 0..layers {
        inputs.push(random_tensor(&mut rng, &[n, 4], 1.0));
        inputs.push(random_tensor(&mut rng, &[n, classes], 1.5));
    }
    Ok(Case {
        store: ParamStore::new(),
        inputs,
        forward: Box::new(move |g, _, ids| {
            let mut out = HeadOutput {
                boxes: Vec::new(),
                logits: Vec::new(),
                num_matching: k,
            };
            for l in 0..layers {
                out.boxes.push(g.sigmoid(ids[2 * l]));
                out.logits.push(ids[2 * l + 1]);
            }
            let (a, _) = set_loss(g, &out, &assignment, &gt_boxes, &gt_labels)?;
            let (b, _) = denoising_loss(g, &out, &dn, &gt_boxes, &gt_labels)?.expect("ground truth present");
            g.add(a, b)
        }),
    })
}

pub fn module_case(module: &str, seed: u64) -> Result<Case> {
    match module {
        "dcft_layer" => dcft_layer_case(seed),
        "deformable_attention" => deformable_attention_case(seed),
        "modulated_cross_attention" => modulated_cross_attention_case(seed),
        "dual_head_stack" => dual_head_case(seed),
        "set_loss" => set_loss_case(seed),
        other => Err(crate::error::Error::Config(format!(
            "unknown gradcheck module {other:?}"
        ))),
    }
}

/// One row per module, each the worst case over all seeds.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rows = Vec::new();
    for m in MODULES {
        let mut row = RowResult {
            module: m.to_string(),
            max_rel_err: 0.0,
            entries: 0,
        };
        for &seed in &cfg.seeds {
            let case = module_case(m, seed)?;
            let (err, n) = check_case(&case, cfg.samples, seed, cfg.corrupt_backward)?;
            row.max_rel_err = row.max_rel_err.max(err);
            row.entries += n;
        }
        rows.push(row);
    }
    Ok(GradCheckReport { rows })
}
