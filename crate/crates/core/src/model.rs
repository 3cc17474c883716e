//! The full detector: backbone, deformable encoder, query selection and dual head.

use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::{Backbone, BackboneKind, DcftConfig};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::head::{
    denoise_mask, make_denoising_queries, DenoiseSet, DualHead, HeadConfig, HeadOutput, Memory, QueryInput,
};
use crate::matching::{
    assign_final, denoising_loss, hungarian_match, match_cost, set_loss, supervised_loss, LossParts, MATCH_COST,
};
use crate::neck::{cell_centres, position_table, DeformConfig, Encoded, Neck};
use crate::nn::Builder;
use crate::param::ParamStore;
use crate::query::{ProposalSet, QuerySelection, TokenPredictions};
use crate::rng::SeededRng;
use crate::tensor::{inverse_sigmoid, sigmoid, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: DcftConfig,
    pub backbone_kind: BackboneKind,
    pub neck: DeformConfig,
    pub head: HeadConfig,
    /// Initialise decoder anchors from the top-scoring encoder tokens.
    pub use_qse: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: DcftConfig::desk(),
            backbone_kind: BackboneKind::Dcft,
            neck: DeformConfig::desk(),
            head: HeadConfig::desk(),
            use_qse: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck.validate()?;
        if self.head.dim != self.neck.dim {
            return Err(Error::Config(format!(
                "head dim {} differs from encoder dim {}",
                self.head.dim, self.neck.dim
            )));
        }
        if self.neck.levels != 3 {
            return Err(Error::Config("the encoder consumes exactly three backbone maps".into()));
        }
        if self.head.num_queries == 0 || self.head.layers == 0 || self.head.num_classes == 0 {
            return Err(Error::Config("queries, layers and classes must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth of one image: normalised `(cx, cy, w, h)` boxes and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

/// Denoising settings for one training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseNoise {
    pub box_shift: f64,
    pub box_scale: f64,
    pub label_flip: f64,
}

impl Default for DenoiseNoise {
    fn default() -> Self {
        Self {
            box_shift: 0.4,
            box_scale: 0.4,
            label_flip: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    pub tokens: TokenPredictions,
    pub encoded: Encoded,
    pub proposals: Option<ProposalSet>,
    pub denoise: Option<DenoiseSet>,
    /// Decoder input: matching queries then denoising queries.
    pub queries: QueryInput,
    /// Extent the normalised coordinates refer to.
    pub frame: (usize, usize),
}

/// Scalar loss values of one image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub matched: LossParts,
    pub denoise: LossParts,
    pub encoder: LossParts,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub query: QuerySelection,
    pub head: DualHead,
}

/// Smallest multiple of `m` that is at least `v`.
fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

impl Detector {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::build(&mut b.sub("backbone"), &cfg.backbone, cfg.backbone_kind)?;
        let ch: Vec<usize> = (1..4).map(|s| cfg.backbone.channels(s)).collect();
        let neck = Neck::build(&mut b.sub("neck"), &cfg.neck, &ch)?;
        let query = QuerySelection::build(
            &mut b.sub("query"),
            cfg.head.dim,
            cfg.head.num_queries,
            cfg.head.num_classes,
        )?;
        let head = DualHead::build(&mut b.sub("head"), &cfg.head)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                neck,
                query,
                head,
            },
            store,
        ))
    }

    /// Extent of the padded frame for an `h × w` image.
    pub fn frame(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.cfg.backbone.patch_size * 8;
        (round_up(h, m), round_up(w, m))
    }

    /// Runs the detector on `image: [H, W]`; with `denoise` the decoder also
    /// receives noised copies of the ground truth.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        denoise: Option<(&Targets, DenoiseNoise, &mut SeededRng)>,
    ) -> Result<ForwardOutput> {
        let (h, w) = match image.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::Dimension(format!("image must be [H, W], got {s:?}"))),
        };
        let maps = self.backbone.forward(g, store, image)?;
        let encoded = self.neck.forward(g, store, &maps)?;
        let tokens = self.query.embed_scores_and_anchors(g, store, &encoded)?;
        let k = self.cfg.head.num_queries;
        let d = self.cfg.head.dim;

        let content = g.param(store, self.query.content);
        let (anchor_logits, proposals) = if self.cfg.use_qse {
            let p = self.query.propose(g, &tokens)?;
            let v: Vec<T> = p.logits.iter().flatten().map(|&x| T::of(x)).collect();
            (g.constant(Tensor::new([k, 4], v)?), Some(p))
        } else {
            (g.param(store, self.query.static_anchors), None)
        };

        let (h0, w0) = encoded.levels[0];
        let rows: Vec<usize> = (0..h0 * w0).collect();
        let features = g.select_rows(encoded.node, &rows)?;
        let key_pos = g.constant(position_table(
            &cell_centres(h0, w0),
            d / 2,
            self.cfg.head.temperature,
            self.cfg.head.pos_scale,
        ));
        let mem = Memory { features, key_pos };

        let (input, dn) = match denoise {
            Some((t, noise, rng)) if !t.boxes.is_empty() && self.cfg.head.dn_groups > 0 => {
                let dn = make_denoising_queries(
                    &t.boxes,
                    &t.labels,
                    self.cfg.head.num_classes,
                    self.cfg.head.dn_groups,
                    (noise.box_shift, noise.box_scale, noise.label_flip),
                    rng,
                );
                let dn_content = self.head.denoise_content(g, store, &dn.labels)?;
                let dl: Vec<T> = dn.boxes.iter().flatten().map(|&x| T::of(inverse_sigmoid(x))).collect();
                let dn_logits = g.constant(Tensor::new([dn.len(), 4], dl)?);
                let input = QueryInput {
                    content: g.concat_rows(&[content, dn_content])?,
                    anchor_logits: g.concat_rows(&[anchor_logits, dn_logits])?,
                    mask: Some(Rc::new(denoise_mask(k, &dn))),
                    num_matching: k,
                };
                (input, Some(dn))
            }
            _ => (
                QueryInput {
                    content,
                    anchor_logits,
                    mask: None,
                    num_matching: k,
                },
                None,
            ),
        };
        let head = self.head.forward(g, store, &input, mem)?;
        Ok(ForwardOutput {
            head,
            tokens,
            encoded,
            proposals,
            denoise: dn,
            queries: input,
            frame: self.frame(h, w),
        })
    }

    /// Matched, denoising and encoder-proposal losses of one forward pass.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, out: &ForwardOutput, t: &Targets) -> Result<(NodeId, LossReport)> {
        let assignment = assign_final(g, &out.head, &t.boxes, &t.labels)?;
        let (matched, mp) = set_loss(g, &out.head, &assignment, &t.boxes, &t.labels)?;
        let mut terms = vec![matched];
        let mut report = LossReport {
            matched: mp,
            ..Default::default()
        };
        if let Some(dn) = &out.denoise {
            if let Some((l, p)) = denoising_loss(g, &out.head, dn, &t.boxes, &t.labels)? {
                terms.push(l);
                report.denoise = p;
            }
        }
        let (el, ep) = self.encoder_loss(g, &out.tokens, t)?;
        terms.push(el);
        report.encoder = ep;
        let total = g.add_all(&terms)?;
        report.total = g.scalar(total).f64();
        Ok((total, report))
    }

    /// Set loss on the per-token proposals, matched over all tokens.
    fn encoder_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        tok: &TokenPredictions,
        t: &Targets,
    ) -> Result<(NodeId, LossParts)> {
        let norm = t.boxes.len().max(1) as f64;
        if t.boxes.is_empty() {
            return supervised_loss(g, tok.class_logits, tok.boxes, &[], &[], &t.boxes, &t.labels, norm);
        }
        let lg = g.value(tok.class_logits);
        let logits: Vec<Vec<f64>> = (0..lg.rows())
            .map(|r| lg.row(r).iter().map(|v| v.f64()).collect())
            .collect();
        let bx = g.value(tok.boxes);
        let boxes: Vec<[f64; 4]> = (0..bx.rows())
            .map(|r| {
                let v = bx.row(r);
                [v[0].f64(), v[1].f64(), v[2].f64(), v[3].f64()]
            })
            .collect();
        let a = hungarian_match(&match_cost(&logits, &boxes, &t.boxes, &t.labels, MATCH_COST))?;
        let preds: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let gts: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        supervised_loss(g, tok.class_logits, tok.boxes, &preds, &gts, &t.boxes, &t.labels, norm)
    }

    /// Top `max_dets` (query, class) pairs of the final layer as pixel-space detections
    /// clipped to the `h × w` image.
    pub fn detections<T: Real>(
        &self,
        g: &Graph<T>,
        out: &ForwardOutput,
        image_id: usize,
        (h, w): (usize, usize),
        max_dets: usize,
    ) -> Vec<Detection> {
        let k = out.head.num_matching;
        let logits = g.value(*out.head.logits.last().expect("at least one layer"));
        let boxes = g.value(*out.head.boxes.last().expect("at least one layer"));
        let c = logits.last_dim();
        let mut cand: Vec<(usize, f64)> = (0..k * c).map(|i| (i, sigmoid(logits.data()[i].f64()))).collect();
        cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        cand.truncate(max_dets);
        let (fh, fw) = (out.frame.0 as f64, out.frame.1 as f64);
        cand.into_iter()
            .map(|(i, p)| {
                let b = boxes.row(i / c);
                let (cx, cy, bw, bh) = (b[0].f64() * fw, b[1].f64() * fh, b[2].f64() * fw, b[3].f64() * fh);
                Detection {
                    image_id,
                    class_id: i % c,
                    bbox: [
                        (cx - bw / 2.0).clamp(0.0, w as f64),
                        (cy - bh / 2.0).clamp(0.0, h as f64),
                        (cx + bw / 2.0).clamp(0.0, w as f64),
                        (cy + bh / 2.0).clamp(0.0, h as f64),
                    ],
                    confidence: p,
                }
            })
            .collect()
    }
}
