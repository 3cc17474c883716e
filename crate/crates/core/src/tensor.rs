//! Dense row-major tensors and the raw numeric kernels behind them.
//!
//! All reductions run sequentially in ascending index order so that results
//! are bitwise reproducible on a given platform. Matrix products use the
//! `i-k-j` (axpy) loop order: every output element still accumulates its
//! `k` terms in ascending order, while the inner loop vectorizes over `j`.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{dim_err, Error, Result};

/// Floating point element type. `f64` is used for gradient checking,
/// `f32` for training.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        // x·0 is NaN exactly for infinite or NaN x; lane sums keep the loop vectorised
        let mut acc = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for (a, &v) in acc.iter_mut().zip(c) {
                *a += v * T::zero();
            }
        }
        acc.iter().all(|a| *a == T::zero()) && tail.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn sum(&self) -> T {
        let mut s = T::zero();
        for &x in &self.data {
            s += x;
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn as_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
    }
}

/// Matrix product `a · b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return dim_err(format!("matmul inner dims differ: {m}x{k} · {k2}x{n}"));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new([m, n], out)
}

/// Row-wise softmax over the last axis. Entries equal to `-inf` act as a mask
/// and receive exactly zero weight; a fully masked row is an error.
pub fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        if !softmax_row(row) {
            return Err(Error::DegenerateSlice { row: r });
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// In-place stabilized softmax. Returns `false` when every entry is `-inf`.
#[inline]
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) -> bool {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    if mx == T::neg_infinity() {
        return false;
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - mx).exp()
        };
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return dim_err(format!(
            "layer_norm: affine params of size {}/{} for last dim {d}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = mean_rstd(xr);
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[inline]
pub(crate) fn mean_rstd<T: Real>(xr: &[T]) -> (T, T) {
    let n = T::of(xr.len() as f64);
    let mut s = T::zero();
    for &v in xr {
        s += v;
    }
    let mean = s / n;
    let mut var = T::zero();
    for &v in xr {
        let c = v - mean;
        var += c * c;
    }
    var = var / n;
    (mean, T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub const INVERSE_SIGMOID_CLAMP: f64 = 1e-4;

/// Logit of `p` after clamping it to `[1e-4, 1 - 1e-4]`.
#[inline]
pub fn inverse_sigmoid<T: Real>(p: T) -> T {
    let lo = T::of(INVERSE_SIGMOID_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    (p / (T::one() - p)).ln()
}

// ---------------------------------------------------------------------------
// GEMM kernels. All accumulate into `c`.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let bp = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = bp[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for i in m4..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let (b0, b1, b2, b3) = (
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let cp = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                cp[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
    }
    for i in m4..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is `n×k`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(b.len(), n * k);
    if m >= 16 {
        let bt = transpose(n, k, b);
        gemm_nn(m, k, n, a, &bt, c);
        return;
    }
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent partial sums.
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let tail: T = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .fold(T::zero(), |s, (&a, &b)| s + a * b);
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let out = matmul(&Tensor::eye(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn row_times_column() {
        let out = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let r = matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 3], &[0.; 6]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(Tensor::<f64>::new([0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::new([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_last(&t(&[3], &[0., 0., 0.])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_last(&t(&[3], &[1., 2., 3.])).unwrap();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        let s = softmax_last(&t(&[2], &[0., f64::NEG_INFINITY])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let x = t(&[2, 2], &[0., 1., f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(softmax_last(&x), Err(Error::DegenerateSlice { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full([2], 1.0);
        let b = Tensor::zeros([2]);
        let out = layer_norm(&t(&[2], &[1., 3.]), &g, &b).unwrap();
        // population variance 1, eps 1e-5
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] + s).abs() < 1e-12);
        assert!((out.data()[1] - s).abs() < 1e-12);

        let g = Tensor::full([4], 1.0);
        let b = Tensor::zeros([4]);
        let out = layer_norm(&t(&[4], &[2.5; 4]), &g, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_mean_is_beta() {
        let g = Tensor::full([5], 1.0);
        let b = Tensor::full([5], 0.7);
        let out = layer_norm(&t(&[5], &[1., -2., 9., 0.5, 3.]), &g, &b).unwrap();
        let mean = out.sum() / 5.0;
        assert!((mean - 0.7).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(inverse_sigmoid(0.5f64), 0.0);
        assert!((inverse_sigmoid(sigmoid(3.0f64)) - 3.0).abs() < 1e-6);
        for i in -80..=80 {
            let x = i as f64 / 10.0;
            assert!((inverse_sigmoid(sigmoid(x)) - x).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn matmul_right_identity_is_exact_for_integers() {
        let a = Tensor::<f64>::new([3, 4], (0..12).map(|i| (i as f64) - 5.0).collect()).unwrap();
        assert_eq!(matmul(&a, &Tensor::eye(4)).unwrap(), a);
    }

    #[test]
    fn kernels_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let bt = transpose(k, n, &b);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);
        assert_eq!(c, c2);
        let at = transpose(m, k, &a);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }
}
