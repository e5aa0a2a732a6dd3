//! Forward numeric kernels shared by the tape and by the non-differentiable
//! reference paths.

use crate::error::{Error, Result};
use crate::real::Real;

use super::Tensor;

/// Accumulating GEMM on contiguous row-major buffers.
///
/// `c (m×n) = beta·c + a' · b'`, where `a'` is `a` (m×k) or, if `ta`, the
/// transpose of a k×m buffer; likewise for `b'`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a (m×k) · bᵀ` for `b` of shape n×k.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Result of [`softmax_rows`].
#[derive(Debug, Clone)]
pub struct Softmax<T: Real> {
    pub probs: Tensor<T>,
    /// Rows whose every entry was masked to −∞; these come back all-zero.
    pub fully_masked: Vec<usize>,
}

/// Numerically stable row softmax with an optional additive mask.
///
/// Entries equal to −∞ after masking produce an exact zero. A row that is
/// −∞ everywhere yields all zeros and is reported in `fully_masked`.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Softmax<T>> {
    let (m, n) = x.dims2()?;
    if let Some(mask) = mask {
        if mask.shape() != x.shape() {
            return Err(Error::shape("softmax_rows mask", x.shape(), mask.shape()));
        }
    }
    let mut out = vec![T::zero(); m * n];
    let mut fully_masked = Vec::new();
    let mut row = vec![T::zero(); n];
    for i in 0..m {
        for j in 0..n {
            row[j] = x.data()[i * n + j] + mask.map_or(T::zero(), |mk| mk.data()[i * n + j]);
        }
        if softmax_in_place(&mut row) {
            fully_masked.push(i);
        }
        out[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok(Softmax {
        probs: Tensor::from_parts(vec![m, n], out),
        fully_masked,
    })
}

/// Softmax over one row in place. Returns `true` (and zeros the row) when
/// every entry is −∞.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return true;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
    false
}

/// `dx = y ⊙ (g − Σ g⊙y)` for one softmax row.
pub(crate) fn softmax_backward_row<T: Real>(y: &[T], g: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yy), &gg) in dx.iter_mut().zip(y).zip(g) {
        *d += yy * (gg - dot);
    }
}

/// Layer normalization forward pass with saved statistics.
pub struct LayerNormForward<T: Real> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<LayerNormForward<T>> {
    let (m, d) = x.dims2()?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = vec![T::zero(); m * d];
    let mut out = vec![T::zero(); m * d];
    let mut rstd = vec![T::zero(); m];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormForward {
        out: Tensor::from_parts(vec![m, d], out),
        xhat,
        rstd,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Mean cross-entropy over labelled rows, plus the softmax used for it.
///
/// Rows with `None` targets are ignored. Returns `(mean_loss, probs, count)`.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
) -> Result<(T, Vec<T>, usize)> {
    let (m, v) = logits.dims2()?;
    if targets.len() != m {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let row = &mut probs[i * v..(i + 1) * v];
        softmax_in_place(row);
        if let Some(t) = *t {
            if t >= v {
                return Err(Error::OutOfVocab { token: t, vocab: v });
            }
            // log-sum-exp on the raw logits keeps tiny probabilities exact
            let raw = logits.row(i);
            let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = raw.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += (lse - raw[t]).as_f64();
            count += 1;
        }
    }
    let mean = if count > 0 { total / count as f64 } else { 0.0 };
    Ok((T::of(mean), probs, count))
}
