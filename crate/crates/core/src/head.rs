//! Task-aligned dual-branch decoder.
//!
//! Each of the interleaved stages runs an anchor-refine layer, which updates
//! the boxes, and a class-refine layer, which reads the freshly refined
//! anchors through a sharing cross-attention before classifying.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::neck::position_table;
use crate::nn::{pe_freqs, Builder, LayerNorm, Linear, Mlp};
use crate::param::{init, ParamStore};
use crate::query::prior_logit;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Lower bound applied to anchor widths and heights in modulated attention.
pub const MIN_ANCHOR_SIDE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub dim: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub temperature: f64,
    pub pos_scale: f64,
    pub dn_groups: usize,
    pub use_qsh: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        Self {
            dim: 64,
            num_queries: 20,
            num_classes: 4,
            layers: 3,
            ffn_dim: 128,
            temperature: 10000.0,
            pos_scale: std::f64::consts::TAU,
            dn_groups: 3,
            use_qsh: true,
        }
    }
}

/// Sinusoidal code of each anchor coordinate: `[n, 4·(D/2)]` from `[n, 4]` boxes.
pub fn anchor_code<T: Real>(
    g: &mut Graph<T>,
    boxes: NodeId,
    dim: usize,
    temperature: f64,
    scale: f64,
) -> Result<NodeId> {
    let freqs: Vec<f64> = pe_freqs(dim / 2, temperature).iter().map(|f| f * scale).collect();
    g.sine_embed(boxes, &freqs)
}

/// Single-head attention `softmax(Q Kᵀ/√D) V` with optional blocking mask.
fn attend<T: Real>(g: &mut Graph<T>, q: NodeId, k: NodeId, v: NodeId, mask: Option<&Rc<Vec<bool>>>) -> Result<NodeId> {
    let d = g.value(q).last_dim();
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let s = match mask {
        Some(m) => g.mask_fill(s, m.clone())?,
        None => s,
    };
    let a = g.softmax(s)?;
    g.matmul(a, v)
}

/// Query self-attention with `Q = K = C + P`, `V = C`.
#[derive(Debug, Clone)]
pub struct SelfAttn {
    pub ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl SelfAttn {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            ln: b.layer_norm("ln", d)?,
            wq: b.linear("wq", d, d)?,
            wk: b.linear("wk", d, d)?,
            wv: b.linear("wv", d, d)?,
            wo: b.linear("wo", d, d)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c: NodeId,
        p: NodeId,
        mask: Option<&Rc<Vec<bool>>>,
    ) -> Result<NodeId> {
        let h = self.ln.forward(g, store, c)?;
        let qk = g.add(h, p)?;
        let q = self.wq.forward(g, store, qk)?;
        let k = self.wk.forward(g, store, qk)?;
        let v = self.wv.forward(g, store, h)?;
        let a = attend(g, q, k, v, mask)?;
        let o = self.wo.forward(g, store, a)?;
        g.add(c, o)
    }
}

/// Plain cross-attention from class content to the shared spatial queries.
#[derive(Debug, Clone)]
pub struct ShareAttn {
    pub ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl ShareAttn {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            ln: b.layer_norm("ln", d)?,
            wq: b.linear("wq", d, d)?,
            wk: b.linear("wk", d, d)?,
            wv: b.linear("wv", d, d)?,
            wo: b.linear("wo", d, d)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c: NodeId,
        shared: NodeId,
        mask: Option<&Rc<Vec<bool>>>,
    ) -> Result<NodeId> {
        let h = self.ln.forward(g, store, c)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, shared)?;
        let v = self.wv.forward(g, store, shared)?;
        let a = attend(g, q, k, v, mask)?;
        let o = self.wo.forward(g, store, a)?;
        g.add(c, o)
    }
}

/// Width/height-modulated cross-attention over one feature map.
#[derive(Debug, Clone)]
pub struct ModCross {
    pub ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub scale_mlp: Mlp,
    pub ref_mlp: Mlp,
    pub wo: Linear,
}

/// Memory the cross-attention reads: features `F` `[HW, D]`, their content
/// keys and the positional keys `Cat(PE(x), PE(y))`.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub features: NodeId,
    pub key_pos: NodeId,
}

/// Intermediate nodes of one modulated cross-attention call.
#[derive(Debug, Clone, Copy)]
pub struct ModCrossParts {
    pub out: NodeId,
    pub attn: NodeId,
}

impl ModCross {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            ln: b.layer_norm("ln", d)?,
            wq: b.linear("wq", d, d)?,
            wk: b.linear("wk", d, d)?,
            scale_mlp: b.mlp("scale_mlp", &[d, d, d], false)?,
            ref_mlp: b.mlp("ref_mlp", &[d, d, 2], false)?,
            wo: b.linear("wo", d, d)?,
        })
    }

    /// Residual update of content `c` for queries anchored at `anchors`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c: NodeId,
        anchors: &[[f64; 4]],
        mem: Memory,
        temperature: f64,
        pos_scale: f64,
    ) -> Result<ModCrossParts> {
        let h = self.ln.forward(g, store, c)?;
        let parts = self.attention(g, store, h, anchors, mem, temperature, pos_scale)?;
        let o = self.wo.forward(g, store, parts.out)?;
        Ok(ModCrossParts {
            out: g.add(c, o)?,
            attn: parts.attn,
        })
    }

    /// The attention itself on already-normalised content `h`; returns the
    /// aggregated features before the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: NodeId,
        anchors: &[[f64; 4]],
        mem: Memory,
        temperature: f64,
        pos_scale: f64,
    ) -> Result<ModCrossParts> {
        let d = g.value(h).last_dim();
        let n = g.value(h).rows();
        if anchors.len() != n {
            return Err(Error::Dimension("one anchor per query required".into()));
        }
        let qc = self.wq.forward(g, store, h)?;
        let kc = self.wk.forward(g, store, mem.features)?;
        let content = g.matmul_nt(qc, kc)?;

        let centres: Vec<(f64, f64)> = anchors.iter().map(|a| (a[0], a[1])).collect();
        let pe_q = g.constant(position_table(&centres, d / 2, temperature, pos_scale));
        let s = self.scale_mlp.forward(g, store, h)?;
        let qp = g.mul(pe_q, s)?;
        let r = self.ref_mlp.forward(g, store, h)?;
        let r = g.sigmoid(r);
        let wr = g.slice_cols(r, 0, 1)?;
        let hr = g.slice_cols(r, 1, 2)?;
        let inv_w: Vec<T> = anchors.iter().map(|a| T::of(1.0 / a[2].max(MIN_ANCHOR_SIDE))).collect();
        let inv_h: Vec<T> = anchors.iter().map(|a| T::of(1.0 / a[3].max(MIN_ANCHOR_SIDE))).collect();
        let inv_w = g.constant(Tensor::new([n], inv_w)?);
        let inv_h = g.constant(Tensor::new([n], inv_h)?);
        let rx = g.row_scale(wr, inv_w)?;
        let ry = g.row_scale(hr, inv_h)?;
        let qx = g.slice_cols(qp, 0, d / 2)?;
        let qy = g.slice_cols(qp, d / 2, d)?;
        let qx = g.row_scale(qx, rx)?;
        let qy = g.row_scale(qy, ry)?;
        let qm = g.concat_cols(&[qx, qy])?;
        let modulated = g.matmul_nt(qm, mem.key_pos)?;
        let modulated = g.scale(modulated, 1.0 / (d as f64).sqrt());
        let score = g.add(content, modulated)?;
        let score = g.scale(score, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(score)?;
        let out = g.matmul(attn, mem.features)?;
        Ok(ModCrossParts { out, attn })
    }
}

#[derive(Debug, Clone)]
pub struct AnchorLayer {
    pub sa: SelfAttn,
    pub ca: ModCross,
    pub ffn_ln: LayerNorm,
    pub ffn: Mlp,
    pub box_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct ClassLayer {
    pub sa: SelfAttn,
    pub share: ShareAttn,
    pub ca: ModCross,
    pub ffn_ln: LayerNorm,
    pub ffn: Mlp,
    pub cls_ln: LayerNorm,
    pub cls: Linear,
}

/// Decoder queries: matching queries first, then denoising queries.
#[derive(Debug, Clone)]
pub struct QueryInput {
    /// Initial content `[n, D]`.
    pub content: NodeId,
    /// Initial anchors as pre-sigmoid values `[n, 4]`.
    pub anchor_logits: NodeId,
    /// Blocking mask `[n, n]` for query-to-query attention.
    pub mask: Option<Rc<Vec<bool>>>,
    pub num_matching: usize,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Refined boxes `[n, 4]` of every anchor-refine layer.
    pub boxes: Vec<NodeId>,
    /// Class logits `[n, classes]` of every class-refine layer.
    pub logits: Vec<NodeId>,
    pub num_matching: usize,
}

#[derive(Debug, Clone)]
pub struct DualHead {
    pub cfg: HeadConfig,
    pub spatial: Mlp,
    pub anchor_layers: Vec<AnchorLayer>,
    pub class_layers: Vec<ClassLayer>,
    pub label_embed: usize,
    pub dn_indicator: usize,
}

fn row4<T: Real>(t: &Tensor<T>, r: usize) -> [f64; 4] {
    let v = t.row(r);
    [v[0].f64(), v[1].f64(), v[2].f64(), v[3].f64()]
}

impl DualHead {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &HeadConfig) -> Result<Self> {
        let d = cfg.dim;
        if !d.is_multiple_of(4) {
            return Err(Error::Config("head dim must be divisible by 4".into()));
        }
        let spatial = b.mlp("spatial", &[2 * d, d, d], false)?;
        let mut anchor_layers = Vec::new();
        let mut class_layers = Vec::new();
        for i in 0..cfg.layers {
            let mut ab = b.sub(&format!("anchor{i}"));
            anchor_layers.push(AnchorLayer {
                sa: SelfAttn::build(&mut ab.sub("sa"), d)?,
                ca: ModCross::build(&mut ab.sub("ca"), d)?,
                ffn_ln: ab.layer_norm("ffn_ln", d)?,
                ffn: ab.mlp("ffn", &[d, cfg.ffn_dim, d], false)?,
                box_head: ab.mlp("box", &[d, d, 4], true)?,
            });
            let mut cb = b.sub(&format!("class{i}"));
            let w = init::xavier(cb.rng, d, cfg.num_classes);
            let cls = cb.linear_from("cls", w, Tensor::full([cfg.num_classes], T::of(prior_logit())))?;
            class_layers.push(ClassLayer {
                sa: SelfAttn::build(&mut cb.sub("sa"), d)?,
                share: ShareAttn::build(&mut cb.sub("share"), d)?,
                ca: ModCross::build(&mut cb.sub("ca"), d)?,
                ffn_ln: cb.layer_norm("ffn_ln", d)?,
                ffn: cb.mlp("ffn", &[d, cfg.ffn_dim, d], false)?,
                cls_ln: cb.layer_norm("cls_ln", d)?,
                cls,
            });
        }
        let label_embed = {
            let t = init::normal(b.rng, &[cfg.num_classes, d], 1.0);
            b.tensor("label_embed", t)?
        };
        let dn_indicator = {
            let t = init::normal(b.rng, &[d], 1.0);
            b.tensor("dn_indicator", t)?
        };
        Ok(Self {
            cfg: cfg.clone(),
            spatial,
            anchor_layers,
            class_layers,
            label_embed,
            dn_indicator,
        })
    }

    /// `P_q = MLP(Cat[PE(x), PE(y), PE(w), PE(h)])` for boxes `[n, 4]`.
    pub fn spatial_query<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, boxes: NodeId) -> Result<NodeId> {
        let code = anchor_code(g, boxes, self.cfg.dim, self.cfg.temperature, self.cfg.pos_scale)?;
        self.spatial.forward(g, store, code)
    }

    /// Content for denoising queries: label embedding plus indicator.
    pub fn denoise_content<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        labels: &[usize],
    ) -> Result<NodeId> {
        let le = g.param(store, self.label_embed);
        let rows = g.select_rows(le, labels)?;
        let ind = g.param(store, self.dn_indicator);
        g.add_bcast(rows, ind)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: &QueryInput,
        mem: Memory,
    ) -> Result<HeadOutput> {
        let cfg = &self.cfg;
        let n = g.value(q.content).rows();
        let mask = q.mask.as_ref();
        let mut ca = q.content;
        let mut cc = q.content;
        let mut logit_node = q.anchor_logits;
        let init_boxes = g.sigmoid(q.anchor_logits);
        let init_vals: Vec<[f64; 4]> = (0..n).map(|r| row4(g.value(init_boxes), r)).collect();
        let static_p = if cfg.use_qsh {
            None
        } else {
            Some(self.spatial_query(g, store, init_boxes)?)
        };
        let mut boxes_node = init_boxes;
        let mut boxes_val = init_vals.clone();
        let mut out_boxes = Vec::new();
        let mut out_logits = Vec::new();
        for (al, cl) in self.anchor_layers.iter().zip(&self.class_layers) {
            // anchor-refine layer
            let p = self.spatial_query(g, store, boxes_node)?;
            ca = al.sa.forward(g, store, ca, p, mask)?;
            ca = al
                .ca
                .forward(g, store, ca, &boxes_val, mem, cfg.temperature, cfg.pos_scale)?
                .out;
            let h = al.ffn_ln.forward(g, store, ca)?;
            let f = al.ffn.forward(g, store, h)?;
            ca = g.add(ca, f)?;
            let delta = al.box_head.forward(g, store, ca)?;
            let new_logits = g.add(logit_node, delta)?;
            let new_boxes = g.sigmoid(new_logits);
            out_boxes.push(new_boxes);
            logit_node = g.detach(new_logits);
            boxes_node = g.sigmoid(logit_node);
            boxes_val = (0..n).map(|r| row4(g.value(boxes_node), r)).collect();

            // class-refine layer
            let (p_share, share_vals) = match static_p {
                Some(p) => (p, &init_vals),
                None => (self.spatial_query(g, store, boxes_node)?, &boxes_val),
            };
            cc = cl.sa.forward(g, store, cc, p_share, mask)?;
            cc = cl.share.forward(g, store, cc, p_share, mask)?;
            cc = cl
                .ca
                .forward(g, store, cc, share_vals, mem, cfg.temperature, cfg.pos_scale)?
                .out;
            let h = cl.ffn_ln.forward(g, store, cc)?;
            let f = cl.ffn.forward(g, store, h)?;
            cc = g.add(cc, f)?;
            let h = cl.cls_ln.forward(g, store, cc)?;
            out_logits.push(cl.cls.forward(g, store, h)?);
        }
        Ok(HeadOutput {
            boxes: out_boxes,
            logits: out_logits,
            num_matching: q.num_matching,
        })
    }
}

/// Noised ground-truth queries with a fixed query → ground-truth correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSet {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
    pub target: Vec<usize>,
    pub group: Vec<usize>,
    pub groups: usize,
}

impl DenoiseSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Valid range for noised box coordinates.
pub const DN_BOX_CLAMP: (f64, f64) = (1e-3, 1.0 - 1e-3);

/// Builds `groups` noised copies of the ground truth.
///
/// Centres move by at most `λ1·w/2` and `λ1·h/2`, sides scale within
/// `[1 − λ2, 1 + λ2]`, and each label flips to a different class with probability `γ`.
pub fn make_denoising_queries(
    boxes: &[[f64; 4]],
    labels: &[usize],
    num_classes: usize,
    groups: usize,
    (lambda1, lambda2, gamma): (f64, f64, f64),
    rng: &mut SeededRng,
) -> DenoiseSet {
    let mut set = DenoiseSet {
        boxes: Vec::new(),
        labels: Vec::new(),
        target: Vec::new(),
        group: Vec::new(),
        groups: if boxes.is_empty() { 0 } else { groups },
    };
    if boxes.is_empty() {
        return set;
    }
    let (lo, hi) = DN_BOX_CLAMP;
    for grp in 0..groups {
        for (i, (b, &l)) in boxes.iter().zip(labels).enumerate() {
            let [cx, cy, w, h] = *b;
            let ncx = cx + rng.range(-1.0, 1.0) * lambda1 * w / 2.0;
            let ncy = cy + rng.range(-1.0, 1.0) * lambda1 * h / 2.0;
            let nw = w * (1.0 + rng.range(-1.0, 1.0) * lambda2);
            let nh = h * (1.0 + rng.range(-1.0, 1.0) * lambda2);
            let label = if num_classes > 1 && rng.bernoulli(gamma) {
                let other = rng.below(num_classes - 1);
                if other >= l {
                    other + 1
                } else {
                    other
                }
            } else {
                l
            };
            set.boxes.push([ncx, ncy, nw, nh].map(|v| v.clamp(lo, hi)));
            set.labels.push(label);
            set.target.push(i);
            set.group.push(grp);
        }
    }
    set
}

/// Blocking mask over `[matching; denoise]` queries: attention is allowed only
/// within the matching set or within one denoising group.
pub fn denoise_mask(num_matching: usize, dn: &DenoiseSet) -> Vec<bool> {
    let n = num_matching + dn.len();
    let group = |i: usize| {
        if i < num_matching {
            None
        } else {
            Some(dn.group[i - num_matching])
        }
    };
    let mut m = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            m.push(group(i) != group(j));
        }
    }
    m
}
