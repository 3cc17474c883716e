use pdtr_core::autograd::{Graph, NodeId};
use pdtr_core::head::{Memory, ModCross};
use pdtr_core::neck::{cell_centres, position_table, to_level_pixels, DeformAttn, DeformConfig};
use pdtr_core::nn::{Builder, Linear, Mlp};
use pdtr_core::{ParamStore, SeededRng, Tensor};

pub fn random(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * std).collect()).unwrap()
}

pub fn jitter(store: &mut ParamStore<f64>, rng: &mut SeededRng, std: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.normal() * std;
        }
    }
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Row-major `[in, out]` weight matrix and bias of a linear layer.
pub fn linear(store: &ParamStore<f64>, l: &Linear) -> (Vec<Vec<f64>>, Vec<f64>) {
    (rows(&store.get(l.w).value), store.get(l.b).value.data().to_vec())
}

pub fn apply(x: &[f64], (w, b): &(Vec<Vec<f64>>, Vec<f64>)) -> Vec<f64> {
    let mut y = b.clone();
    for (xi, wr) in x.iter().zip(w) {
        for (yo, wv) in y.iter_mut().zip(wr) {
            *yo += xi * wv;
        }
    }
    y
}

pub fn matvec(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let zeros = vec![0.0; w[0].len()];
    apply(x, &(w.to_vec(), zeros))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mlp(x: &[f64], store: &ParamStore<f64>, m: &Mlp) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        h = apply(&h, &linear(store, l));
        if i + 1 < m.layers.len() {
            h = h.into_iter().map(gelu).collect();
        }
    }
    h
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sinusoidal code `[sin, cos, sin, cos, …]` of length `half`.
pub fn pe(v: f64, half: usize, temperature: f64, scale: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..half / 2 {
        let f = temperature.powf(-(2.0 * i as f64) / half as f64);
        out.push((v * scale * f).sin());
        out.push((v * scale * f).cos());
    }
    out
}

pub fn max_diff(a: &Tensor<f64>, b: &[Vec<f64>]) -> f64 {
    a.data()
        .iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------ deformable attention

pub struct DeformInstance {
    pub cfg: DeformConfig,
    pub store: ParamStore<f64>,
    pub attn: DeformAttn,
    pub levels: Vec<(usize, usize)>,
    pub refs: Vec<(f64, f64)>,
    pub query: Tensor<f64>,
    pub source: Tensor<f64>,
}

pub fn deform_instance(seed: u64) -> DeformInstance {
    let mut rng = SeededRng::new(seed);
    let heads = 1 + rng.below(2);
    let cfg = DeformConfig {
        dim: 4 * heads,
        heads,
        points: 1 + rng.below(3),
        levels: 1 + rng.below(3),
        ..DeformConfig::desk()
    };
    let mut levels = Vec::new();
    let mut budget = 8;
    for s in 0..cfg.levels {
        let left = cfg.levels - s - 1;
        let area = budget - left;
        let h = 1 + rng.below(area.min(2));
        let w = 1 + rng.below((area / h).min(3));
        budget -= h * w;
        levels.push((h, w));
    }
    let tokens: usize = levels.iter().map(|(h, w)| h * w).sum();
    let mut store = ParamStore::new();
    let attn = DeformAttn::build(&mut Builder::new(&mut store, &mut rng), &cfg).unwrap();
    jitter(&mut store, &mut rng, 0.5);
    let q = 1 + rng.below(4);
    let refs = (0..q).map(|_| (rng.uniform(), rng.uniform())).collect();
    let query = random(&mut rng, &[q, cfg.dim], 1.0);
    let source = random(&mut rng, &[tokens, cfg.dim], 1.0);
    DeformInstance {
        cfg,
        store,
        attn,
        levels,
        refs,
        query,
        source,
    }
}

/// Output of the deformable attention written as explicit loops, with
/// bilinear sampling expressed as tent weights over every cell of a level.
pub fn naive_deform(inst: &DeformInstance) -> Vec<Vec<f64>> {
    let (m_heads, s_levels, k_points) = (inst.cfg.heads, inst.cfg.levels, inst.cfg.points);
    let c = inst.cfg.dim;
    let dh = c / m_heads;
    let st = &inst.store;
    let w_value = rows(&st.get(inst.attn.w_value).value);
    let w_out = rows(&st.get(inst.attn.w_out).value);
    let offsets = linear(st, &inst.attn.offsets);
    let weights = linear(st, &inst.attn.weights);
    let source = rows(&inst.source);
    let projected: Vec<Vec<f64>> = source.iter().map(|z| matvec(z, &w_value)).collect();
    let mut starts = Vec::new();
    let mut first = 0;
    for &(h, w) in &inst.levels {
        starts.push(first);
        first += h * w;
    }
    let mut out = Vec::new();
    for (qi, zq) in rows(&inst.query).iter().enumerate() {
        let off = apply(zq, &offsets);
        let logit = apply(zq, &weights);
        let (rx, ry) = inst.refs[qi];
        let mut heads_out = vec![0.0; c];
        for m in 0..m_heads {
            let slots: Vec<f64> = (0..s_levels * k_points)
                .map(|j| logit[m * s_levels * k_points + j])
                .collect();
            let a = softmax(&slots);
            for s in 0..s_levels {
                let (h, w) = inst.levels[s];
                for k in 0..k_points {
                    let slot = (m * s_levels + s) * k_points + k;
                    let px = to_level_pixels(rx, w) + off[2 * slot];
                    let py = to_level_pixels(ry, h) + off[2 * slot + 1];
                    for y in 0..h {
                        for x in 0..w {
                            let tent = (1.0 - (px - x as f64).abs()).max(0.0) * (1.0 - (py - y as f64).abs()).max(0.0);
                            if tent == 0.0 {
                                continue;
                            }
                            let v = &projected[starts[s] + y * w + x];
                            for ch in 0..dh {
                                heads_out[m * dh + ch] += a[s * k_points + k] * tent * v[m * dh + ch];
                            }
                        }
                    }
                }
            }
        }
        out.push(matvec(&heads_out, &w_out));
    }
    out
}

pub fn run_deform(inst: &DeformInstance) -> (Graph<f64>, NodeId, NodeId) {
    let mut g = Graph::new();
    let q = g.input(inst.query.clone());
    let s = g.input(inst.source.clone());
    let parts = inst
        .attn
        .forward(&mut g, &inst.store, q, &inst.refs, s, &inst.levels)
        .unwrap();
    (g, parts.out, parts.weights)
}

pub struct CrossInstance {
    pub store: ParamStore<f64>,
    pub ca: ModCross,
    pub anchors: Vec<[f64; 4]>,
    pub content: Tensor<f64>,
    pub features: Tensor<f64>,
    pub map: (usize, usize),
    pub d: usize,
}

pub const TEMPERATURE: f64 = 10000.0;
pub const POS_SCALE: f64 = std::f64::consts::TAU;

pub fn cross_instance(seed: u64) -> CrossInstance {
    let mut rng = SeededRng::new(seed);
    let d = 4 * (1 + rng.below(3));
    let map = (1 + rng.below(3), 1 + rng.below(4));
    let mut store = ParamStore::new();
    let ca = ModCross::build(&mut Builder::new(&mut store, &mut rng), d).unwrap();
    jitter(&mut store, &mut rng, 0.3);
    let n = 1 + rng.below(4);
    let anchors = (0..n)
        .map(|_| [rng.uniform(), rng.uniform(), rng.range(0.05, 1.0), rng.range(0.05, 1.0)])
        .collect();
    let content = random(&mut rng, &[n, d], 1.0);
    let features = random(&mut rng, &[map.0 * map.1, d], 1.0);
    CrossInstance {
        store,
        ca,
        anchors,
        content,
        features,
        map,
        d,
    }
}

pub fn run_cross(inst: &CrossInstance) -> (Graph<f64>, NodeId, NodeId) {
    let mut g = Graph::new();
    let h = g.input(inst.content.clone());
    let f = g.input(inst.features.clone());
    let kp = g.constant(position_table(
        &cell_centres(inst.map.0, inst.map.1),
        inst.d / 2,
        TEMPERATURE,
        POS_SCALE,
    ));
    let mem = Memory {
        features: f,
        key_pos: kp,
    };
    let parts = inst
        .ca
        .attention(&mut g, &inst.store, h, &inst.anchors, mem, TEMPERATURE, POS_SCALE)
        .unwrap();
    (g, parts.out, parts.attn)
}

/// Aggregated features and attention rows of the modulated cross-attention,
/// one query and one key at a time. With `modulate` off the width and height
/// ratios are dropped from the positional term.
pub fn naive_cross(inst: &CrossInstance, modulate: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = inst.d;
    let half = d / 2;
    let st = &inst.store;
    let wq = linear(st, &inst.ca.wq);
    let wk = linear(st, &inst.ca.wk);
    let feats = rows(&inst.features);
    let (mh, mw) = inst.map;
    let mut outs = Vec::new();
    let mut attns = Vec::new();
    for (qi, c) in rows(&inst.content).iter().enumerate() {
        let [xq, yq, wq_box, hq_box] = inst.anchors[qi];
        let qc = apply(c, &wq);
        let scale = mlp(c, st, &inst.ca.scale_mlp);
        let r: Vec<f64> = mlp(c, st, &inst.ca.ref_mlp)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let (rw, rh) = if modulate {
            (r[0] / wq_box, r[1] / hq_box)
        } else {
            (1.0, 1.0)
        };
        let pex: Vec<f64> = pe(xq, half, TEMPERATURE, POS_SCALE)
            .iter()
            .zip(&scale[..half])
            .map(|(p, s)| p * s)
            .collect();
        let pey: Vec<f64> = pe(yq, half, TEMPERATURE, POS_SCALE)
            .iter()
            .zip(&scale[half..])
            .map(|(p, s)| p * s)
            .collect();
        let mut scores = Vec::new();
        for ky in 0..mh {
            for kx in 0..mw {
                let f = &feats[ky * mw + kx];
                let kc = apply(f, &wk);
                let x = (kx as f64 + 0.5) / mw as f64;
                let y = (ky as f64 + 0.5) / mh as f64;
                let modulated = (dot(&pex, &pe(x, half, TEMPERATURE, POS_SCALE)) * rw
                    + dot(&pey, &pe(y, half, TEMPERATURE, POS_SCALE)) * rh)
                    / (d as f64).sqrt();
                scores.push((dot(&qc, &kc) + modulated) / (d as f64).sqrt());
            }
        }
        let a = softmax(&scores);
        let mut o = vec![0.0; d];
        for (aj, f) in a.iter().zip(&feats) {
            for (ov, fv) in o.iter_mut().zip(f) {
                *ov += aj * fv;
            }
        }
        outs.push(o);
        attns.push(a);
    }
    (outs, attns)
}
