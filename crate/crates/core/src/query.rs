//! Decoder inputs: top-K anchor proposals from encoder tokens plus static content queries.

use std::cmp::Ordering;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::neck::Encoded;
use crate::nn::{Builder, Linear, Mlp};
use crate::param::{init, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{inverse_sigmoid, Real, Tensor};

/// Logit of the prior class probability 0.01 used to bias classifiers.
pub fn prior_logit() -> f64 {
    -((1.0 - 0.01f64) / 0.01).ln()
}

/// Per-token predictions of the encoder proposal heads.
#[derive(Debug, Clone, Copy)]
pub struct TokenPredictions {
    /// `[T, classes]`
    pub class_logits: NodeId,
    /// `[T, 4]` pre-sigmoid box coordinates.
    pub anchor_logits: NodeId,
    /// `[T, 4]` boxes `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: NodeId,
}

/// Selected proposals, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    pub anchors: Vec<[f64; 4]>,
    /// Pre-sigmoid form of `anchors`.
    pub logits: Vec<[f64; 4]>,
}

/// Base anchor of a token: its cell centre with side `0.05·2^level`.
pub fn base_anchor(centre: (f64, f64), level: usize) -> [f64; 4] {
    let s = 0.05 * (1u32 << level) as f64;
    [centre.0, centre.1, s, s]
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("top-{k} requested from {} tokens", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone)]
pub struct QuerySelection {
    pub class_head: Linear,
    pub anchor_head: Mlp,
    /// Static content queries `[K, D]`.
    pub content: usize,
    /// Learnable anchors `[K, 4]` (pre-sigmoid) used when proposal selection is off.
    pub static_anchors: usize,
    pub num_queries: usize,
    pub num_classes: usize,
}

impl QuerySelection {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, dim: usize, num_queries: usize, num_classes: usize) -> Result<Self> {
        let w = init::xavier(b.rng, dim, num_classes);
        let class_head = b.linear_from("class_head", w, Tensor::full([num_classes], T::of(prior_logit())))?;
        let anchor_head = b.mlp("anchor_head", &[dim, dim, 4], true)?;
        let content = {
            let t = init::normal(b.rng, &[num_queries, dim], 1.0);
            b.tensor("content", t)?
        };
        let static_anchors = {
            let mut v = Vec::with_capacity(num_queries * 4);
            let mut r = SeededRng::derive(b.rng.next_u64(), 17);
            for _ in 0..num_queries {
                v.push(inverse_sigmoid(r.range(0.05, 0.95)));
                v.push(inverse_sigmoid(r.range(0.05, 0.95)));
                v.push(inverse_sigmoid(0.1));
                v.push(inverse_sigmoid(0.1));
            }
            b.tensor("static_anchors", Tensor::from_f64([num_queries, 4], &v)?)?
        };
        Ok(Self {
            class_head,
            anchor_head,
            content,
            static_anchors,
            num_queries,
            num_classes,
        })
    }

    /// Class logits and anchors for every encoder token.
    pub fn embed_scores_and_anchors<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        enc: &Encoded,
    ) -> Result<TokenPredictions> {
        let class_logits = self.class_head.forward(g, store, enc.node)?;
        let delta = self.anchor_head.forward(g, store, enc.node)?;
        let mut base = Vec::with_capacity(enc.refs.len() * 4);
        for (&c, &l) in enc.refs.iter().zip(&enc.level_of) {
            base.extend(base_anchor(c, l).map(|v| T::of(inverse_sigmoid(v))));
        }
        let base = g.constant(Tensor::new([enc.refs.len(), 4], base)?);
        let anchor_logits = g.add(base, delta)?;
        let boxes = g.sigmoid(anchor_logits);
        Ok(TokenPredictions {
            class_logits,
            anchor_logits,
            boxes,
        })
    }

    /// Top-K tokens by their best class probability.
    pub fn propose<T: Real>(&self, g: &Graph<T>, preds: &TokenPredictions) -> Result<ProposalSet> {
        let logits = g.value(preds.class_logits);
        let scores: Vec<f64> = (0..logits.rows())
            .map(|r| {
                logits
                    .row(r)
                    .iter()
                    .map(|&v| crate::tensor::sigmoid(v.f64()))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let tokens = select_topk(&scores, self.num_queries)?;
        let al = g.value(preds.anchor_logits);
        let bx = g.value(preds.boxes);
        let pick = |t: &Tensor<T>, r: usize| -> [f64; 4] {
            let row = t.row(r);
            [row[0].f64(), row[1].f64(), row[2].f64(), row[3].f64()]
        };
        Ok(ProposalSet {
            scores: tokens.iter().map(|&t| scores[t]).collect(),
            anchors: tokens.iter().map(|&t| pick(bx, t)).collect(),
            logits: tokens.iter().map(|&t| pick(al, t)).collect(),
            tokens,
        })
    }
}
