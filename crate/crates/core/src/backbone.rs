//! Hierarchical four-stage backbone built from coarse-to-fine windowed attention.
//!
//! Each stage holds an `[H·W, c]` token map. A DCFT layer pools its input at
//! several granularities, and the queries of one `n_wp × n_wp` window attend to
//! an `N^l × N^l` grid of cells at every level, centred on the window. Fine
//! cells carry a relative-position bias table; coarse cells one scalar per slot.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, NO_INDEX};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, Mlp};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcftConfig {
    pub patch_size: usize,
    pub depths: [usize; 4],
    pub c1: usize,
    pub heads: [usize; 4],
    pub window: usize,
    pub pool_sizes: Vec<usize>,
    pub region_sizes: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for DcftConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DcftConfig {
    /// 128-pixel desk profile.
    pub fn desk() -> Self {
        Self {
            patch_size: 4,
            depths: [1, 1, 2, 1],
            c1: 32,
            heads: [1, 2, 4, 4],
            window: 3,
            pool_sizes: vec![1, 2, 4],
            region_sizes: vec![3, 3, 2],
            mlp_ratio: 4,
        }
    }

    /// Full-size backbone: 224 input, 7×7 windows.
    pub fn reference() -> Self {
        Self {
            patch_size: 4,
            depths: [2, 2, 6, 2],
            c1: 96,
            heads: [3, 4, 4, 4],
            window: 7,
            pool_sizes: vec![1, 3, 5, 7],
            region_sizes: vec![3, 3, 3, 3],
            mlp_ratio: 4,
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.c1 << stage
    }

    pub fn levels(&self) -> usize {
        self.pool_sizes.len()
    }

    /// `N = Σ_l (N^l)²` keys per query.
    pub fn keys_per_query(&self) -> usize {
        self.region_sizes.iter().map(|n| n * n).sum()
    }

    /// Start of the fine key grid relative to the window's first row/column.
    fn fine_offset(&self) -> i64 {
        (self.window as f64 / 2.0 - self.region_sizes[0] as f64 / 2.0 + 0.5).floor() as i64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size != 4 {
            return bad(format!("patch_size must be 4, got {}", self.patch_size));
        }
        if self.depths.contains(&0) || self.c1 == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("depths, c1, window and mlp_ratio must be positive".into());
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || h > 4 || !self.channels(s).is_multiple_of(h) {
                return bad(format!(
                    "stage {s}: {h} heads do not divide {} channels (max 4 heads)",
                    self.channels(s)
                ));
            }
        }
        if self.pool_sizes.is_empty() || self.pool_sizes[0] != 1 {
            return bad("pool_sizes must start with 1".into());
        }
        if self.pool_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("pool_sizes must be strictly ascending".into());
        }
        if self.region_sizes.len() != self.pool_sizes.len() || self.region_sizes.contains(&0) {
            return bad("region_sizes must give one positive extent per level".into());
        }
        let o = self.fine_offset();
        let w = self.window as i64;
        let n1 = self.region_sizes[0] as i64;
        if o < 0 || o + n1 - 1 > w - 1 {
            return bad(format!(
                "fine region {n1} does not fit the relative-bias range of window {w}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Dcft,
    Plain,
}

/// One backbone output: tokens `[h·w, c]` in row-major spatial order.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureMapSet {
    pub maps: Vec<FeatureMap>,
}

// ------------------------------------------------------------------ formulas

/// `(L + Σ_l (n^l)²) · H·W·c`.
pub fn complexity_count(pool_sizes: &[usize], h: usize, w: usize, c: usize) -> u64 {
    let l = pool_sizes.len() as u64;
    let s: u64 = pool_sizes.iter().map(|&n| (n * n) as u64).sum();
    (l + s) * (h * w * c) as u64
}

/// Windowed-attention reference `(4c + 2·n_wp²) · H·W·c`.
pub fn swin_complexity(window: usize, h: usize, w: usize, c: usize) -> u64 {
    ((4 * c + 2 * window * window) * h * w * c) as u64
}

/// Global-attention reference `(4c + 2·H·W) · H·W·c`.
pub fn vit_complexity(h: usize, w: usize, c: usize) -> u64 {
    ((4 * c + 2 * h * w) * h * w * c) as u64
}

/// Multiply-accumulates of the score and value products of one DCFT attention
/// on an `h × w × c` map, counted while running it.
pub fn instrumented_attention_macs(cfg: &DcftConfig, h: usize, w: usize, c: usize, heads: usize) -> Result<u64> {
    cfg.validate()?;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let plan = AttnPlan::new(cfg, h, w);
    let rows: usize = plan.pooled.iter().map(|(a, b)| a * b).sum();
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::zeros([h * w, c]));
    let k = g.constant(Tensor::zeros([rows, c]));
    let v = g.constant(Tensor::zeros([rows, c]));
    let bias = g.constant(Tensor::zeros([bias_table_len(cfg), heads]));
    dcft_attention(&mut g, q, k, v, bias, &plan, heads)?;
    Ok(g.batched_macs())
}

// --------------------------------------------------------------- key layout

/// Cells of the key grid at one level for the window containing `(ty, tx)`.
///
/// Returns `N × N` entries in row-major order; `None` marks a cell outside the
/// pooled map.
pub fn key_grid(
    map_h: usize,
    map_w: usize,
    window: usize,
    pool: usize,
    region: usize,
    ty: usize,
    tx: usize,
) -> Vec<Option<(usize, usize)>> {
    let ph = map_h.div_ceil(pool) as i64;
    let pw = map_w.div_ceil(pool) as i64;
    let start = |t: usize| {
        let ws = (t / window * window) as f64;
        ((ws + window as f64 / 2.0) / pool as f64 - region as f64 / 2.0 + 0.5).floor() as i64
    };
    let (sy, sx) = (start(ty), start(tx));
    let mut out = Vec::with_capacity(region * region);
    for dy in 0..region as i64 {
        for dx in 0..region as i64 {
            let (y, x) = (sy + dy, sx + dx);
            out.push((y >= 0 && x >= 0 && y < ph && x < pw).then_some((y as usize, x as usize)));
        }
    }
    out
}

/// Gather indices for one DCFT layer on an `h × w` map.
#[derive(Debug, Clone)]
pub struct AttnPlan {
    /// Levels actually present (coarse levels larger than the map are dropped).
    pub levels: Vec<usize>,
    /// Pooled map extents per present level.
    pub pooled: Vec<(usize, usize)>,
    /// Keys per query.
    pub n_keys: usize,
    /// Per `(token, slot)`: row in the concatenated pooled maps.
    pub key_rows: Vec<Option<usize>>,
    /// Per `(token, slot)`: entry of the bias table.
    pub bias_slot: Vec<usize>,
}

impl AttnPlan {
    pub fn new(cfg: &DcftConfig, h: usize, w: usize) -> Self {
        let levels: Vec<usize> = (0..cfg.levels()).filter(|&l| cfg.pool_sizes[l] <= h.min(w)).collect();
        let pooled: Vec<(usize, usize)> = levels
            .iter()
            .map(|&l| (h.div_ceil(cfg.pool_sizes[l]), w.div_ceil(cfg.pool_sizes[l])))
            .collect();
        let n_keys: usize = levels.iter().map(|&l| cfg.region_sizes[l].pow(2)).sum();
        let wb = 2 * cfg.window - 1;
        let fine_table = wb * wb;
        let mut key_rows = Vec::with_capacity(h * w * n_keys);
        let mut bias_slot = Vec::with_capacity(h * w * n_keys);
        for ty in 0..h {
            for tx in 0..w {
                let mut row_base = 0;
                for (li, &l) in levels.iter().enumerate() {
                    let (pool, region) = (cfg.pool_sizes[l], cfg.region_sizes[l]);
                    let grid = key_grid(h, w, cfg.window, pool, region, ty, tx);
                    let coarse_base = fine_table + (1..l).map(|k| cfg.region_sizes[k].pow(2)).sum::<usize>();
                    for (slot, cell) in grid.iter().enumerate() {
                        key_rows.push(cell.map(|(y, x)| row_base + y * pooled[li].1 + x));
                        if l == 0 {
                            // validated: offsets fit the (2·n_wp − 1)² table
                            let (dy, dx) = ((slot / region) as i64, (slot % region) as i64);
                            let ws_y = (ty / cfg.window * cfg.window) as i64;
                            let ws_x = (tx / cfg.window * cfg.window) as i64;
                            let o = cfg.fine_offset();
                            let ry = ws_y + o + dy - ty as i64 + cfg.window as i64 - 1;
                            let rx = ws_x + o + dx - tx as i64 + cfg.window as i64 - 1;
                            bias_slot.push(ry as usize * wb + rx as usize);
                        } else {
                            bias_slot.push(coarse_base + slot);
                        }
                    }
                    row_base += pooled[li].0 * pooled[li].1;
                }
            }
        }
        Self {
            levels,
            pooled,
            n_keys,
            key_rows,
            bias_slot,
        }
    }
}

/// Bias table entries per head: `(2·n_wp − 1)²` fine offsets plus one per coarse slot.
pub fn bias_table_len(cfg: &DcftConfig) -> usize {
    let wb = 2 * cfg.window - 1;
    wb * wb + cfg.region_sizes[1..].iter().map(|n| n * n).sum::<usize>()
}

// ------------------------------------------------------------------ ops

/// Pools `z: [h·w, c]` over `n × n` sub-windows with weights `weight: [n²]`.
/// The map is zero-padded up to a multiple of `n`.
pub fn pool_subwindows<T: Real>(
    g: &mut Graph<T>,
    z: NodeId,
    h: usize,
    w: usize,
    n: usize,
    weight: NodeId,
) -> Result<NodeId> {
    if n > h.min(w) {
        return Err(Error::Config(format!("pool size {n} exceeds map {h}x{w}")));
    }
    if n == 1 {
        return Ok(z);
    }
    let c = g.value(z).last_dim();
    let (ph, pw) = (h.div_ceil(n), w.div_ceil(n));
    let mut idx = Vec::with_capacity(ph * pw * n * n * c);
    for py in 0..ph {
        for px in 0..pw {
            for sy in 0..n {
                for sx in 0..n {
                    let (y, x) = (py * n + sy, px * n + sx);
                    for ch in 0..c {
                        idx.push(if y < h && x < w {
                            ((y * w + x) * c + ch) as u32
                        } else {
                            NO_INDEX
                        });
                    }
                }
            }
        }
    }
    let cells = g.index_select(z, Rc::new(idx), [ph * pw, n * n, c])?;
    g.contract_mid(cells, weight)
}

/// Normalised Gaussian over an `n × n` sub-window, σ = n/3.
pub fn gaussian_pool_init<T: Real>(n: usize) -> Tensor<T> {
    let sigma = n as f64 / 3.0;
    let mid = (n as f64 - 1.0) / 2.0;
    let mut v: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - mid, (i % n) as f64 - mid);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Tensor::from_f64([n * n], &v).expect("positive extent")
}

/// Attention of every query token over its gathered keys.
///
/// `q: [T, c]`, `k`, `v: [rows, c]` (concatenated pooled levels) and
/// `bias: [table, heads]`. Returns `[T, c]`.
pub fn dcft_attention<T: Real>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    bias: NodeId,
    plan: &AttnPlan,
    heads: usize,
) -> Result<NodeId> {
    Ok(dcft_attention_parts(g, q, k, v, bias, plan, heads)?.out)
}

/// Output `[T, c]` and attention weights `[T·heads, 1, keys]` of one DCFT attention.
#[derive(Debug, Clone, Copy)]
pub struct DcftAttnParts {
    pub out: NodeId,
    pub weights: NodeId,
}

pub fn dcft_attention_parts<T: Real>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    bias: NodeId,
    plan: &AttnPlan,
    heads: usize,
) -> Result<DcftAttnParts> {
    let t = g.value(q).rows();
    let c = g.value(q).last_dim();
    let dh = c / heads;
    let n = plan.n_keys;
    let mut kv_idx = Vec::with_capacity(t * heads * n * dh);
    let mut b_idx = Vec::with_capacity(t * heads * n);
    let mut mask = Vec::with_capacity(t * heads * n);
    for ti in 0..t {
        for h in 0..heads {
            for s in 0..n {
                let row = plan.key_rows[ti * n + s];
                for j in 0..dh {
                    kv_idx.push(row.map_or(NO_INDEX, |r| (r * c + h * dh + j) as u32));
                }
                b_idx.push((plan.bias_slot[ti * n + s] * heads + h) as u32);
                mask.push(row.is_none());
            }
        }
    }
    let kv_idx = Rc::new(kv_idx);
    let qh = g.reshape(q, [t * heads, 1, dh])?;
    let kg = g.index_select(k, kv_idx.clone(), [t * heads, n, dh])?;
    let vg = g.index_select(v, kv_idx, [t * heads, n, dh])?;
    let s = g.bmm_nt(qh, kg)?;
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let b = g.index_select(bias, Rc::new(b_idx), [t * heads, 1, n])?;
    let s = g.add(s, b)?;
    let s = g.mask_fill(s, Rc::new(mask))?;
    let a = g.softmax(s)?;
    let o = g.bmm(a, vg)?;
    Ok(DcftAttnParts {
        out: g.reshape(o, [t, c])?,
        weights: a,
    })
}

// --------------------------------------------------------------- layers

#[derive(Debug, Clone)]
pub struct DcftLayer {
    pub ln1: LayerNorm,
    pub fq: Linear,
    pub fk: Linear,
    pub fv: Linear,
    pub fo: Linear,
    /// Pooling weights per level (`None` for the identity level).
    pub pool: Vec<Option<usize>>,
    pub bias: usize,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl DcftLayer {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &DcftConfig, c: usize, heads: usize) -> Result<Self> {
        let mut pool = Vec::new();
        for (l, &n) in cfg.pool_sizes.iter().enumerate() {
            pool.push(if n == 1 {
                None
            } else {
                Some(b.tensor(&format!("f_p{}", l + 1), gaussian_pool_init(n))?)
            });
        }
        Ok(Self {
            ln1: b.layer_norm("ln1", c)?,
            fq: b.linear("f_q", c, c)?,
            fk: b.linear("f_k", c, c)?,
            fv: b.linear("f_v", c, c)?,
            fo: b.linear("f_o", c, c)?,
            pool,
            bias: b.tensor("bias", Tensor::zeros([bias_table_len(cfg), heads]))?,
            ln2: b.layer_norm("ln2", c)?,
            mlp: b.mlp("mlp", &[c, c * cfg.mlp_ratio, c], false)?,
            heads,
        })
    }

    /// Pre-norm residual layer on `x: [h·w, c]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &DcftConfig,
        x: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let plan = AttnPlan::new(cfg, h, w);
        let y = self.ln1.forward(g, store, x)?;
        let q = self.fq.forward(g, store, y)?;
        let mut pooled = Vec::with_capacity(plan.levels.len());
        for &l in &plan.levels {
            pooled.push(match self.pool[l] {
                None => y,
                Some(pid) => {
                    let wgt = g.param(store, pid);
                    pool_subwindows(g, y, h, w, cfg.pool_sizes[l], wgt)?
                }
            });
        }
        let z = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)?
        };
        let k = self.fk.forward(g, store, z)?;
        let v = self.fv.forward(g, store, z)?;
        let bias = g.param(store, self.bias);
        let a = dcft_attention(g, q, k, v, bias, &plan, self.heads)?;
        let a = self.fo.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let y = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, y)?;
        g.add(x, m)
    }
}

/// Residual MLP block used by the plain backbone.
#[derive(Debug, Clone)]
pub struct PlainLayer {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub enum Block {
    Dcft(DcftLayer),
    Plain(PlainLayer),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<(LayerNorm, Linear)>,
    pub blocks: Vec<Block>,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: DcftConfig,
    pub kind: BackboneKind,
    pub embed: Linear,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &DcftConfig, kind: BackboneKind) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let embed = b.linear("patch_embed", p * p, cfg.c1)?;
        let mut stages = Vec::new();
        for s in 0..4 {
            let c = cfg.channels(s);
            let mut sb = b.sub(&format!("stage{}", s + 1));
            let merge = if s == 0 {
                None
            } else {
                Some((sb.layer_norm("merge_ln", 2 * c)?, sb.linear("merge", 2 * c, c)?))
            };
            let mut blocks = Vec::new();
            for i in 0..cfg.depths[s] {
                let mut lb = sb.sub(&format!("layer{i}"));
                blocks.push(match kind {
                    BackboneKind::Dcft => Block::Dcft(DcftLayer::build(&mut lb, cfg, c, cfg.heads[s])?),
                    BackboneKind::Plain => Block::Plain(PlainLayer {
                        ln: lb.layer_norm("ln", c)?,
                        mlp: lb.mlp("mlp", &[c, c * cfg.mlp_ratio, c], false)?,
                    }),
                });
            }
            stages.push(Stage { merge, blocks, c });
        }
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            embed,
            stages,
        })
    }

    /// Runs all stages on `image: [H, W]` and returns the last three stage maps.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<FeatureMapSet> {
        let padded = pad_to_multiple(image, self.cfg.patch_size * 8)?;
        let (mut x, mut h, mut w) = patch_embed(g, store, &self.embed, &padded, self.cfg.patch_size)?;
        let mut maps = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some((ln, lin)) = &stage.merge {
                let (m, nh, nw) = merge_patches(g, x, h, w)?;
                let m = ln.forward(g, store, m)?;
                x = lin.forward(g, store, m)?;
                h = nh;
                w = nw;
            }
            for block in &stage.blocks {
                x = match block {
                    Block::Dcft(l) => l.forward(g, store, &self.cfg, x, h, w)?,
                    Block::Plain(l) => {
                        let y = l.ln.forward(g, store, x)?;
                        let y = l.mlp.forward(g, store, y)?;
                        g.add(x, y)?
                    }
                };
            }
            if s >= 1 {
                maps.push(FeatureMap {
                    node: x,
                    h,
                    w,
                    c: stage.c,
                    stride: self.cfg.patch_size << s,
                });
            }
        }
        Ok(FeatureMapSet { maps })
    }
}

/// Pads `[H, W]` by edge replication so both extents are multiples of `m`.
pub fn pad_to_multiple<T: Real>(image: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("image must be [H, W], got {s:?}"))),
    };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let d = image.data();
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for x in 0..pw {
            out.push(d[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    Tensor::new([ph, pw], out)
}

/// Linear embedding of non-overlapping `p × p` patches. Returns `(tokens, h, w)`.
pub fn patch_embed<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &Linear,
    image: &Tensor<T>,
    p: usize,
) -> Result<(NodeId, usize, usize)> {
    let image = pad_to_multiple(image, p)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (th, tw) = (h / p, w / p);
    let d = image.data();
    let mut patches = Vec::with_capacity(h * w);
    for ty in 0..th {
        for tx in 0..tw {
            for y in 0..p {
                for x in 0..p {
                    patches.push(d[(ty * p + y) * w + tx * p + x]);
                }
            }
        }
    }
    let patches = g.constant(Tensor::new([th * tw, p * p], patches)?);
    Ok((proj.forward(g, store, patches)?, th, tw))
}

/// Gathers each 2×2 neighbourhood of `[h·w, c]` into one `4c` token (zero padded).
pub fn merge_patches<T: Real>(g: &mut Graph<T>, x: NodeId, h: usize, w: usize) -> Result<(NodeId, usize, usize)> {
    let c = g.value(x).last_dim();
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(nh * nw * 4 * c);
    for y in 0..nh {
        for xx in 0..nw {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                for ch in 0..c {
                    idx.push(if sy < h && sx < w {
                        ((sy * w + sx) * c + ch) as u32
                    } else {
                        NO_INDEX
                    });
                }
            }
        }
    }
    Ok((g.index_select(x, Rc::new(idx), [nh * nw, 4 * c])?, nh, nw))
}
