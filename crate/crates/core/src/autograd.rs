//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! immutable once pushed; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a parameter or on an
//! input created with `requires_grad`. A graph is single-threaded and is meant
//! to be dropped after one backward pass.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::param::ParamStore;
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, mean_rstd, sigmoid, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for an absent source element in [`Graph::index_select`].
pub const NO_INDEX: u32 = u32::MAX;

/// Level layout for the fused deformable sampling op.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformLayout {
    /// `(height, width, first_row)` per level in the flattened value table.
    pub levels: Vec<(usize, usize, usize)>,
    pub heads: usize,
    pub head_dim: usize,
    pub points: usize,
}

impl DeformLayout {
    pub fn total_rows(&self) -> usize {
        self.levels.iter().map(|&(h, w, _)| h * w).sum()
    }
}

enum Op<T> {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddBcast(NodeId, NodeId),
    MulBcast(NodeId, NodeId),
    RowScale(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    BmmNT(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<(T, T)>,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    ClampMin(NodeId, T),
    InverseSigmoid(NodeId),
    IndexSelect(NodeId, Rc<Vec<u32>>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MaskFill(NodeId, Rc<Vec<bool>>),
    ContractMid(NodeId, NodeId),
    SumAll(NodeId),
    SineEmbed {
        x: NodeId,
        freqs: Vec<T>,
    },
    DeformSample {
        value: NodeId,
        loc: NodeId,
        weight: NodeId,
        layout: Rc<DeformLayout>,
    },
    FocalLoss {
        logits: NodeId,
        targets: Rc<Vec<T>>,
        alpha: T,
        gamma: T,
    },
    GiouLoss {
        pred: NodeId,
        target: Rc<Vec<T>>,
    },
    L1Loss {
        pred: NodeId,
        target: Rc<Vec<T>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBcast(..) => "add_bcast",
            Op::MulBcast(..) => "mul_bcast",
            Op::RowScale(..) => "row_scale",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Bmm(..) => "bmm",
            Op::BmmNT(..) => "bmm_nt",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ClampMin(..) => "clamp_min",
            Op::InverseSigmoid(_) => "inverse_sigmoid",
            Op::IndexSelect(..) => "index_select",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::MaskFill(..) => "mask_fill",
            Op::ContractMid(..) => "contract_mid",
            Op::SumAll(_) => "sum",
            Op::SineEmbed { .. } => "sine_embed",
            Op::DeformSample { .. } => "deform_sample",
            Op::FocalLoss { .. } => "focal_loss",
            Op::GiouLoss { .. } => "giou_loss",
            Op::L1Loss { .. } => "l1_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    fault: Option<String>,
    batched_macs: u64,
    /// Test hook: perturbs the softmax backward so verification must fail.
    corrupt_backward: bool,
    /// Values returned by successive `detach` calls instead of their inputs.
    frozen: Option<Vec<Tensor<T>>>,
    detached: Vec<NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            fault: None,
            batched_macs: 0,
            corrupt_backward: false,
            frozen: None,
            detached: Vec::new(),
        }
    }

    /// Multiply-accumulates performed by forward `bmm`/`bmm_nt` so far.
    pub fn batched_macs(&self) -> u64 {
        self.batched_macs
    }

    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    /// Makes the i-th `detach` return `values[i]`, so finite differences see
    /// stop-gradient points as the constants the backward pass assumes.
    pub fn freeze_detached(&mut self, values: Vec<Tensor<T>>) {
        self.frozen = Some(values);
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        self.detached.iter().map(|&id| self.value(id).clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    /// Returns an error if any recorded op produced NaN or an unexpected infinity.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(m) => Err(Error::Numeric(m.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        if self.fault.is_none() {
            let bad = match op {
                Op::MaskFill(..) => value.data().iter().any(|v| v.is_nan() || *v == T::infinity()),
                _ => !value.all_finite(),
            };
            if bad {
                self.fault = Some(format!(
                    "non-finite output from {} (node {})",
                    op.name(),
                    self.nodes.len()
                ));
            }
        }
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ---------------------------------------------------------------- leaves

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `x` with no gradient path back to it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = match &self.frozen {
            Some(f) if self.detached.len() < f.len() => f[self.detached.len()].clone(),
            _ => self.value(x).clone(),
        };
        let id = self.constant(v);
        self.detached.push(id);
        id
    }

    /// Registers parameter `pid` of `store` (once per graph) and returns its node.
    pub fn param(&mut self, store: &ParamStore<T>, pid: usize) -> NodeId {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        let v = store.get(pid).value.clone();
        let id = self.push(v, Op::Param, true);
        self.param_nodes[pid] = Some(id);
        id
    }

    /// `(parameter index, node)` for every parameter used in this graph.
    pub fn params(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.param_nodes
            .iter()
            .enumerate()
            .filter_map(|(p, n)| n.map(|n| (p, n)))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[r, j] + b[j]` with `x` viewed as rows of `len(b)`.
    pub fn add_bcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(b).numel();
        if !self.value(x).numel().is_multiple_of(n) {
            return dim_err(format!("add_bcast: {:?} by {:?}", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::AddBcast(x, b), ng))
    }

    /// `x[r, j] * b[j]` with `x` viewed as rows of `len(b)`.
    pub fn mul_bcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(b).numel();
        if !self.value(x).numel().is_multiple_of(n) {
            return dim_err(format!("mul_bcast: {:?} by {:?}", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bd) {
                *o *= bv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::MulBcast(x, b), ng))
    }

    /// `x[r, j] * s[r]`: one scale per row.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let rows = self.value(s).numel();
        if !self.value(x).numel().is_multiple_of(rows) {
            return dim_err(format!("row_scale: {:?} by {:?}", self.shape(x), self.shape(s)));
        }
        let d = self.value(x).numel() / rows;
        let sd = self.data(s).to_vec();
        let mut out = self.data(x).to_vec();
        for (row, &sv) in out.chunks_mut(d).zip(&sd) {
            for o in row.iter_mut() {
                *o *= sv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(v, Op::RowScale(x, s), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let v = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, c), ng)
    }

    // --------------------------------------------------------------- products

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = mat2(self.shape(a), "matmul_nt lhs")?;
        let (n, k2) = mat2(self.shape(b), "matmul_nt rhs")?;
        if k != k2 {
            return dim_err(format!("matmul_nt: {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.data(a), self.data(b), &mut out);
        let v = Tensor::new([m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulNT(a, b), ng))
    }

    /// Batched `[B, m, k] · [B, k, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, m, k) = mat3(self.shape(a), "bmm lhs")?;
        let (bs2, k2, n) = mat3(self.shape(b), "bmm rhs")?;
        if bs != bs2 || k != k2 {
            return dim_err(format!("bmm: {:?} · {:?}", self.shape(a), self.shape(b)));
        }
        self.batched_macs += (bs * m * n * k) as u64;
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm_nn(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new([bs, m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Bmm(a, b), ng))
    }

    /// Batched `[B, m, k] · [B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, m, k) = mat3(self.shape(a), "bmm_nt lhs")?;
        let (bs2, n, k2) = mat3(self.shape(b), "bmm_nt rhs")?;
        if bs != bs2 || k != k2 {
            return dim_err(format!("bmm_nt: {:?} · {:?}ᵀ", self.shape(a), self.shape(b)));
        }
        self.batched_macs += (bs * m * n * k) as u64;
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm_nt(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new([bs, m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::BmmNT(a, b), ng))
    }

    // ------------------------------------------------------------ activations

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_last(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return dim_err(format!("layer_norm: last dim {d} vs affine {:?}", self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / d);
        for (xr, or) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = mean_rstd(xr);
            for j in 0..d {
                or[j] = (xr[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, stats }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_fwd);
        let ng = self.ng(&[x]);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> NodeId {
        let lo = T::of(lo);
        let v = self.value(x).map(|v| v.max(lo));
        let ng = self.ng(&[x]);
        self.push(v, Op::ClampMin(x, lo), ng)
    }

    pub fn inverse_sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(tensor::inverse_sigmoid);
        let ng = self.ng(&[x]);
        self.push(v, Op::InverseSigmoid(x), ng)
    }

    // ------------------------------------------------------------ rearranging

    /// Output element `i` is `x[idx[i]]`, or zero for [`NO_INDEX`].
    pub fn index_select(&mut self, x: NodeId, idx: Rc<Vec<u32>>, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != idx.len() {
            return dim_err(format!("index_select: {} indices for shape {shape:?}", idx.len()));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == NO_INDEX {
                out.push(T::zero());
            } else if (i as usize) < n {
                out.push(xd[i as usize]);
            } else {
                return dim_err(format!("index_select: index {i} out of range {n}"));
            }
        }
        let v = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::IndexSelect(x, idx), ng))
    }

    /// Selects whole rows of a `[R, d]` tensor.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        let mut idx = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for j in 0..d {
                idx.push((r * d + j) as u32);
            }
        }
        self.index_select(x, Rc::new(idx), [rows.len(), d])
    }

    /// Columns `lo..hi` of a `[R, d]` tensor.
    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        let r = self.value(x).rows();
        if lo >= hi || hi > d {
            return dim_err(format!("slice_cols {lo}..{hi} of width {d}"));
        }
        let mut idx = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            for j in lo..hi {
                idx.push((i * d + j) as u32);
            }
        }
        self.index_select(x, Rc::new(idx), [r, hi - lo])
    }

    /// Reinterprets the shape without moving data.
    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != n {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let idx: Vec<u32> = (0..n as u32).collect();
        self.index_select(x, Rc::new(idx), shape)
    }

    /// Concatenation along the last axis of equally-many-row tensors.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            if self.value(x).rows() != rows {
                return dim_err("concat_cols: row counts differ");
            }
            total += self.value(x).last_dim();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let v = Tensor::new([rows, total], out)?;
        let ng = self.ng(xs);
        Ok(self.push(v, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Concatenation along the first axis of `[r_i, d]` tensors.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let d = self.value(xs[0]).last_dim();
        let mut out = Vec::new();
        for &x in xs {
            if self.value(x).last_dim() != d {
                return dim_err("concat_rows: widths differ");
            }
            out.extend_from_slice(self.data(x));
        }
        let rows = out.len() / d;
        let v = Tensor::new([rows, d], out)?;
        let ng = self.ng(xs);
        Ok(self.push(v, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Sets masked entries to `-inf` ahead of a softmax.
    pub fn mask_fill(&mut self, x: NodeId, mask: Rc<Vec<bool>>) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return dim_err("mask_fill: mask size differs from input");
        }
        let mut out = self.data(x).to_vec();
        for (o, &m) in out.iter_mut().zip(mask.iter()) {
            if m {
                *o = T::neg_infinity();
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::MaskFill(x, mask), ng))
    }

    /// `y[a, c] = Σ_b w[b] · x[a, b, c]`.
    pub fn contract_mid(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (a, b, c) = mat3(self.shape(x), "contract_mid")?;
        if self.value(w).numel() != b {
            return dim_err(format!("contract_mid: weight {:?} vs middle axis {b}", self.shape(w)));
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); a * c];
        for i in 0..a {
            let o = &mut out[i * c..(i + 1) * c];
            for (j, &wj) in wd.iter().enumerate() {
                let xr = &xd[(i * b + j) * c..(i * b + j + 1) * c];
                for (ov, &xv) in o.iter_mut().zip(xr) {
                    *ov += wj * xv;
                }
            }
        }
        let v = Tensor::new([a, c], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(v, Op::ContractMid(x, w), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums a list of scalar nodes in order.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    // ------------------------------------------------------------ fused ops

    /// Interleaved sine/cosine embedding of every element of `x: [n, k]`,
    /// giving `[n, k · 2·len(freqs)]`: for each element, `sin(v·f₀), cos(v·f₀), sin(v·f₁), …`.
    pub fn sine_embed(&mut self, x: NodeId, freqs: &[f64]) -> Result<NodeId> {
        let freqs: Vec<T> = freqs.iter().map(|&f| T::of(f)).collect();
        let rows = self.value(x).rows();
        let k = self.value(x).last_dim();
        let w = 2 * freqs.len();
        let mut out = Vec::with_capacity(rows * k * w);
        for &v in self.data(x) {
            for &f in &freqs {
                let a = v * f;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
        let t = Tensor::new([rows, k * w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SineEmbed { x, freqs }, ng))
    }

    /// Multi-scale deformable sampling core.
    ///
    /// * `value`: `[Σ H_s·W_s, heads·head_dim]`
    /// * `loc`: `[Q, heads·levels·points·2]`, `(x, y)` in level pixel coordinates
    /// * `weight`: `[Q, heads·levels·points]`
    ///
    /// Returns `[Q, heads·head_dim]` where each head's slice is
    /// `Σ_{s,k} weight · bilinear(value_s, loc)` with zero padding outside the map.
    pub fn deform_sample(
        &mut self,
        value: NodeId,
        loc: NodeId,
        weight: NodeId,
        layout: Rc<DeformLayout>,
    ) -> Result<NodeId> {
        let (m, cv, k) = (layout.heads, layout.head_dim, layout.points);
        let s = layout.levels.len();
        let c = m * cv;
        let vshape = self.shape(value);
        if vshape != [layout.total_rows(), c] {
            return dim_err(format!("deform_sample: value {vshape:?} vs layout"));
        }
        let q = self.value(weight).rows();
        if self.value(weight).numel() != q * m * s * k || self.value(loc).numel() != q * m * s * k * 2 {
            return dim_err("deform_sample: loc/weight sizes do not match layout");
        }
        let (vd, ld, wd) = (self.data(value), self.data(loc), self.data(weight));
        let mut out = vec![T::zero(); q * c];
        for qi in 0..q {
            for h in 0..m {
                let o = &mut out[qi * c + h * cv..qi * c + (h + 1) * cv];
                for (si, &(lh, lw, base)) in layout.levels.iter().enumerate() {
                    for p in 0..k {
                        let slot = ((qi * m + h) * s + si) * k + p;
                        let a = wd[slot];
                        let (px, py) = (ld[2 * slot], ld[2 * slot + 1]);
                        for (r, wgt) in bilinear_taps(px, py, lh, lw) {
                            let coef = a * wgt;
                            let src = &vd[(base + r) * c + h * cv..(base + r) * c + (h + 1) * cv];
                            for (ov, &sv) in o.iter_mut().zip(src) {
                                *ov += coef * sv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new([q, c], out)?;
        let ng = self.ng(&[value, loc, weight]);
        Ok(self.push(
            t,
            Op::DeformSample {
                value,
                loc,
                weight,
                layout,
            },
            ng,
        ))
    }

    /// Summed sigmoid focal loss of `logits` against 0/1 `targets` of the same size.
    pub fn focal_loss(&mut self, logits: NodeId, targets: Vec<T>, alpha: f64, gamma: f64) -> Result<NodeId> {
        if targets.len() != self.value(logits).numel() {
            return dim_err("focal_loss: target size differs");
        }
        let (alpha, gamma) = (T::of(alpha), T::of(gamma));
        let mut s = T::zero();
        for (&x, &t) in self.data(logits).iter().zip(&targets) {
            s += focal_elem(x, t, alpha, gamma).0;
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::FocalLoss {
                logits,
                targets: Rc::new(targets),
                alpha,
                gamma,
            },
            ng,
        ))
    }

    /// `Σ (1 − GIoU)` between `pred: [n, 4]` and `target` boxes, both `(cx, cy, w, h)`.
    pub fn giou_loss(&mut self, pred: NodeId, target: Vec<T>) -> Result<NodeId> {
        if target.len() != self.value(pred).numel() || self.value(pred).last_dim() != 4 {
            return dim_err("giou_loss: expects matching [n, 4] boxes");
        }
        let mut s = T::zero();
        for (p, t) in self.data(pred).chunks(4).zip(target.chunks(4)) {
            s += T::one() - giou_fwd(p, t).giou;
        }
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::GiouLoss {
                pred,
                target: Rc::new(target),
            },
            ng,
        ))
    }

    /// `Σ |pred − target|`.
    pub fn l1_loss(&mut self, pred: NodeId, target: Vec<T>) -> Result<NodeId> {
        if target.len() != self.value(pred).numel() {
            return dim_err("l1_loss: target size differs");
        }
        let mut s = T::zero();
        for (&p, &t) in self.data(pred).iter().zip(&target) {
            s += (p - t).abs();
        }
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::L1Loss {
                pred,
                target: Rc::new(target),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        self.check()?;
        if self.value(root).numel() != 1 {
            return dim_err("backward root must be a scalar");
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bd[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * ad[j] / (bd[j] * bd[j]);
                    }
                });
            }
            Op::AddBcast(x, b) => {
                let n = self.value(*b).numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulBcast(x, b) => {
                let n = self.value(*b).numel();
                let (xd, bd) = (self.data(*x), self.data(*b));
                acc(*x, &mut |gx| {
                    for (gr, grow) in gx.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gr[j] += grow[j] * bd[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (xr, grow) in xd.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            gb[j] += grow[j] * xr[j];
                        }
                    }
                });
            }
            Op::RowScale(x, s) => {
                let rows = self.value(*s).numel();
                let d = g.len() / rows;
                let (xd, sd) = (self.data(*x), self.data(*s));
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..d {
                            gx[r * d + j] += g[r * d + j] * sd[r];
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for r in 0..rows {
                        let mut t = T::zero();
                        for j in 0..d {
                            t += g[r * d + j] * xd[r * d + j];
                        }
                        gs[r] += t;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * *c;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm_nt(m, n, k, g, bd, ga));
                acc(*b, &mut |gb| gemm_tn(m, k, n, ad, g, gb));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm_nn(m, n, k, g, bd, ga));
                acc(*b, &mut |gb| gemm_tn(m, n, k, g, ad, gb));
            }
            Op::Bmm(a, b) => {
                let s = self.shape(*a);
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.shape(*b)[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::BmmNT(a, b) => {
                let s = self.shape(*a);
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bs {
                        gemm_nn(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bs {
                        gemm_tn(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let fudge = if self.corrupt_backward { T::of(1.01) } else { T::one() };
                acc(*x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dot) * fudge;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let d = node.value.last_dim();
                let xd = self.data(*x);
                let gm = self.data(*gamma);
                let xhat = |r: usize, j: usize| (xd[r * d + j] - stats[r].0) * stats[r].1;
                acc(*beta, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += row[j] * xhat(r, j);
                        }
                    }
                });
                if needs(*x) {
                    acc(*x, &mut |gx| {
                        let inv_d = T::one() / T::of(d as f64);
                        let mut gh = vec![T::zero(); d];
                        for (r, row) in g.chunks(d).enumerate() {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                gh[j] = row[j] * gm[j];
                                m1 += gh[j];
                                m2 += gh[j] * xhat(r, j);
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            for j in 0..d {
                                gx[r * d + j] += stats[r].1 * (gh[j] - m1 - xhat(r, j) * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xd[j]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (T::one() - y[j]);
                }
            }),
            Op::ClampMin(x, lo) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if xd[j] >= *lo {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::InverseSigmoid(x) => {
                let xd = self.data(*x);
                let lo = T::of(tensor::INVERSE_SIGMOID_CLAMP);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        let p = xd[j];
                        if p >= lo && p <= T::one() - lo {
                            gx[j] += g[j] / (p * (T::one() - p));
                        }
                    }
                });
            }
            Op::IndexSelect(x, idx) => acc(*x, &mut |gx| {
                for (&i, &gv) in idx.iter().zip(g) {
                    if i != NO_INDEX {
                        gx[i as usize] += gv;
                    }
                }
            }),
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.last_dim();
                let mut off = 0;
                for &x in xs {
                    let d = self.value(x).last_dim();
                    acc(x, &mut |gx| {
                        for r in 0..rows {
                            add_into(&mut gx[r * d..(r + 1) * d], &g[r * total + off..r * total + off + d]);
                        }
                    });
                    off += d;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    acc(x, &mut |gx| add_into(gx, &g[off..off + n]));
                    off += n;
                }
            }
            Op::MaskFill(x, mask) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    if !mask[j] {
                        gx[j] += g[j];
                    }
                }
            }),
            Op::ContractMid(x, w) => {
                let s = self.shape(*x);
                let (a, b, c) = (s[0], s[1], s[2]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |gx| {
                    for i in 0..a {
                        for j in 0..b {
                            let base = (i * b + j) * c;
                            for t in 0..c {
                                gx[base + t] += wd[j] * g[i * c + t];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..a {
                        for j in 0..b {
                            let base = (i * b + j) * c;
                            let mut t = T::zero();
                            for u in 0..c {
                                t += g[i * c + u] * xd[base + u];
                            }
                            gw[j] += t;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SineEmbed { x, freqs } => {
                let xd = self.data(*x);
                let w = 2 * freqs.len();
                acc(*x, &mut |gx| {
                    for (e, &v) in xd.iter().enumerate() {
                        let mut t = T::zero();
                        for (fi, &f) in freqs.iter().enumerate() {
                            let a = v * f;
                            t += g[e * w + 2 * fi] * f * a.cos() - g[e * w + 2 * fi + 1] * f * a.sin();
                        }
                        gx[e] += t;
                    }
                });
            }
            Op::DeformSample {
                value,
                loc,
                weight,
                layout,
            } => self.deform_backward(g, *value, *loc, *weight, layout, grads),
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let xd = self.data(*logits);
                acc(*logits, &mut |gx| {
                    for j in 0..xd.len() {
                        gx[j] += g[0] * focal_elem(xd[j], targets[j], *alpha, *gamma).1;
                    }
                });
            }
            Op::GiouLoss { pred, target } => {
                let pd = self.data(*pred);
                acc(*pred, &mut |gp| {
                    for (b, (p, t)) in pd.chunks(4).zip(target.chunks(4)).enumerate() {
                        let d = giou_grad(p, t);
                        for j in 0..4 {
                            gp[4 * b + j] -= g[0] * d[j];
                        }
                    }
                });
            }
            Op::L1Loss { pred, target } => {
                let pd = self.data(*pred);
                acc(*pred, &mut |gp| {
                    for j in 0..pd.len() {
                        let diff = pd[j] - target[j];
                        if diff > T::zero() {
                            gp[j] += g[0];
                        } else if diff < T::zero() {
                            gp[j] -= g[0];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        g: &[T],
        value: NodeId,
        loc: NodeId,
        weight: NodeId,
        layout: &DeformLayout,
        grads: &mut [Option<Vec<T>>],
    ) {
        let (m, cv, k) = (layout.heads, layout.head_dim, layout.points);
        let s = layout.levels.len();
        let c = m * cv;
        let (vd, ld, wd) = (self.data(value), self.data(loc), self.data(weight));
        let q = wd.len() / (m * s * k);
        let mut gv = self.nodes[value.0].needs_grad.then(|| vec![T::zero(); vd.len()]);
        let mut gl = self.nodes[loc.0].needs_grad.then(|| vec![T::zero(); ld.len()]);
        let mut gw = self.nodes[weight.0].needs_grad.then(|| vec![T::zero(); wd.len()]);
        let mut sample = vec![T::zero(); cv];
        for qi in 0..q {
            for h in 0..m {
                let go = &g[qi * c + h * cv..qi * c + (h + 1) * cv];
                for (si, &(lh, lw, base)) in layout.levels.iter().enumerate() {
                    for p in 0..k {
                        let slot = ((qi * m + h) * s + si) * k + p;
                        let a = wd[slot];
                        let (px, py) = (ld[2 * slot], ld[2 * slot + 1]);
                        let x0 = px.floor();
                        let y0 = py.floor();
                        let fx = px - x0;
                        let fy = py - y0;
                        let (x0, y0) = (x0.f64() as i64, y0.f64() as i64);
                        let fetch = |xi: i64, yi: i64| -> Option<usize> {
                            (xi >= 0 && yi >= 0 && (xi as usize) < lw && (yi as usize) < lh)
                                .then(|| base + yi as usize * lw + xi as usize)
                        };
                        let corners = [
                            (fetch(x0, y0), (T::one() - fx) * (T::one() - fy)),
                            (fetch(x0 + 1, y0), fx * (T::one() - fy)),
                            (fetch(x0, y0 + 1), (T::one() - fx) * fy),
                            (fetch(x0 + 1, y0 + 1), fx * fy),
                        ];
                        // d(sample)/dx and d(sample)/dy coefficients per corner
                        let dx = [-(T::one() - fy), T::one() - fy, -fy, fy];
                        let dy = [-(T::one() - fx), -fx, T::one() - fx, fx];
                        sample.iter_mut().for_each(|v| *v = T::zero());
                        let mut gdx = T::zero();
                        let mut gdy = T::zero();
                        for (ci, &(row, wgt)) in corners.iter().enumerate() {
                            let Some(r) = row else { continue };
                            let src = &vd[r * c + h * cv..r * c + (h + 1) * cv];
                            let mut dot = T::zero();
                            for u in 0..cv {
                                sample[u] += wgt * src[u];
                                dot += go[u] * src[u];
                            }
                            gdx += dx[ci] * dot;
                            gdy += dy[ci] * dot;
                            if let Some(gv) = gv.as_mut() {
                                let dst = &mut gv[r * c + h * cv..r * c + (h + 1) * cv];
                                let coef = a * wgt;
                                for u in 0..cv {
                                    dst[u] += coef * go[u];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let mut t = T::zero();
                            for u in 0..cv {
                                t += go[u] * sample[u];
                            }
                            gw[slot] += t;
                        }
                        if let Some(gl) = gl.as_mut() {
                            gl[2 * slot] += a * gdx;
                            gl[2 * slot + 1] += a * gdy;
                        }
                    }
                }
            }
        }
        for (id, gr) in [(value, gv), (loc, gl), (weight, gw)] {
            if let Some(gr) = gr {
                match &mut grads[id.0] {
                    Some(existing) => add_into(existing, &gr),
                    slot => *slot = Some(gr),
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mat2(s: &[usize], what: &str) -> Result<(usize, usize)> {
    match s {
        [a, b] => Ok((*a, *b)),
        _ => dim_err(format!("{what}: expected rank 2, got {s:?}")),
    }
}

fn mat3(s: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match s {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => dim_err(format!("{what}: expected rank 3, got {s:?}")),
    }
}

/// Bilinear taps around `(px, py)` on an `h × w` grid, skipping cells outside
/// the map (zero padding). Returns `(row index, weight)` pairs.
pub(crate) fn bilinear_taps<T: Real>(px: T, py: T, h: usize, w: usize) -> impl Iterator<Item = (usize, T)> {
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = px - x0f;
    let fy = py - y0f;
    let (x0, y0) = (x0f.f64() as i64, y0f.f64() as i64);
    let cand = [
        (x0, y0, (T::one() - fx) * (T::one() - fy)),
        (x0 + 1, y0, fx * (T::one() - fy)),
        (x0, y0 + 1, (T::one() - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    cand.into_iter().filter_map(move |(xi, yi, wgt)| {
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h).then(|| (yi as usize * w + xi as usize, wgt))
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// tanh-form GELU written as x·σ(2u), since ½(1 + tanh u) = σ(2u)
fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of(2.0 * GELU_C);
    let u2 = c * (x + T::of(0.044715) * x * x * x);
    x / (T::one() + (-u2).exp())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(2.0 * GELU_C);
    let u2 = c * (x + T::of(0.044715) * x * x * x);
    let s = T::one() / (T::one() + (-u2).exp());
    s + x * s * (T::one() - s) * c * (T::one() + T::of(3.0 * 0.044715) * x * x)
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss value and its derivative with respect to the logit.
fn focal_elem<T: Real>(x: T, t: T, alpha: T, gamma: T) -> (T, T) {
    let p = sigmoid(x);
    let one = T::one();
    // log p = -softplus(-x), log(1-p) = -softplus(x)
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let pos_w = (one - p).powf(gamma);
    let neg_w = p.powf(gamma);
    let loss = -alpha * t * pos_w * log_p - (one - alpha) * (one - t) * neg_w * log_q;
    let d_pos = alpha * pos_w * (gamma * p * log_p - (one - p));
    let d_neg = (one - alpha) * neg_w * (p - gamma * (one - p) * log_q);
    (loss, t * d_pos + (one - t) * d_neg)
}

pub(crate) struct GiouParts<T> {
    pub giou: T,
}

fn corners<T: Real>(b: &[T]) -> [T; 4] {
    let two = T::of(2.0);
    [
        b[0] - b[2] / two,
        b[1] - b[3] / two,
        b[0] + b[2] / two,
        b[1] + b[3] / two,
    ]
}

pub(crate) fn giou_fwd<T: Real>(p: &[T], t: &[T]) -> GiouParts<T> {
    let [x1, y1, x2, y2] = corners(p);
    let [u1, v1, u2, v2] = corners(t);
    let iw = (x2.min(u2) - x1.max(u1)).max(T::zero());
    let ih = (y2.min(v2) - y1.max(v1)).max(T::zero());
    let inter = iw * ih;
    let area_p = (x2 - x1) * (y2 - y1);
    let area_t = (u2 - u1) * (v2 - v1);
    let union = area_p + area_t - inter;
    let cw = x2.max(u2) - x1.min(u1);
    let ch = y2.max(v2) - y1.min(v1);
    let hull = cw * ch;
    let iou = inter / union;
    GiouParts {
        giou: iou - (hull - union) / hull,
    }
}

/// Gradient of GIoU with respect to the predicted `(cx, cy, w, h)`.
fn giou_grad<T: Real>(p: &[T], t: &[T]) -> [T; 4] {
    let zero = T::zero();
    let one = T::one();
    let [x1, y1, x2, y2] = corners(p);
    let [u1, v1, u2, v2] = corners(t);
    let iw = x2.min(u2) - x1.max(u1);
    let ih = y2.min(v2) - y1.max(v1);
    let (iw_pos, ih_pos) = (iw > zero, ih > zero);
    let (iw, ih) = (iw.max(zero), ih.max(zero));
    let inter = iw * ih;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = (u2 - u1) * (v2 - v1);
    let union = area_p + area_t - inter;
    let cw = x2.max(u2) - x1.min(u1);
    let ch = y2.max(v2) - y1.min(v1);
    let hull = cw * ch;

    let d_inter = one / union + inter / (union * union) - one / hull;
    let d_area = -inter / (union * union) + one / hull;
    let d_hull = -union / (hull * hull);

    let ind = |c: bool| if c { one } else { zero };
    // partials of iw, ih, cw, ch w.r.t. x1, y1, x2, y2
    let diw = [-ind(iw_pos && x1 > u1), zero, ind(iw_pos && x2 < u2), zero];
    let dih = [zero, -ind(ih_pos && y1 > v1), zero, ind(ih_pos && y2 < v2)];
    let dcw = [-ind(x1 <= u1), zero, ind(x2 >= u2), zero];
    let dch = [zero, -ind(y1 <= v1), zero, ind(y2 >= v2)];
    let darea = [-ph, -pw, ph, pw];
    let mut dc = [zero; 4];
    for j in 0..4 {
        let di = diw[j] * ih + dih[j] * iw;
        let dh = dcw[j] * ch + dch[j] * cw;
        dc[j] = d_inter * di + d_area * darea[j] + d_hull * dh;
    }
    let half = T::of(0.5);
    [
        dc[0] + dc[2],
        dc[1] + dc[3],
        (dc[2] - dc[0]) * half,
        (dc[3] - dc[1]) * half,
    ]
}
