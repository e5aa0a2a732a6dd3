//! Multi-head softmax attention with full, window and chunk locality.
//!
//! The dense path materializes the L × L score matrix per head and sets
//! every entry outside the pattern to −∞ before the softmax; it is the
//! semantic reference. The
//! banded path visits only the keys a pattern allows, which for window and
//! chunk patterns is one contiguous range per query, giving O(L·w·d) time
//! and O(L·w) score memory.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::ops::{self, softmax_backward_row, softmax_in_place};
use crate::tensor::CustomOp;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Full,
    Window,
    Chunk,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Full => "full",
            PatternKind::Window => "window",
            PatternKind::Chunk => "chunk",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PatternKind::Full),
            "window" => Ok(PatternKind::Window),
            "chunk" => Ok(PatternKind::Chunk),
            other => Err(Error::InvalidArgument(format!("unknown attention pattern `{other}`"))),
        }
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalityPattern {
    pub kind: PatternKind,
    /// Keys per side for window attention.
    pub window: usize,
    /// Block length for chunk attention; the last chunk may be shorter.
    pub chunk: usize,
    pub causal: bool,
}

impl LocalityPattern {
    pub fn full(causal: bool) -> Self {
        LocalityPattern {
            kind: PatternKind::Full,
            window: 0,
            chunk: 0,
            causal,
        }
    }

    pub fn window(w: usize, causal: bool) -> Self {
        LocalityPattern {
            kind: PatternKind::Window,
            window: w,
            chunk: 0,
            causal,
        }
    }

    pub fn chunk(c: usize, causal: bool) -> Self {
        LocalityPattern {
            kind: PatternKind::Chunk,
            window: 0,
            chunk: c,
            causal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PatternKind::Window if self.window == 0 => {
                Err(Error::InvalidArgument("window size must be at least 1".into()))
            }
            PatternKind::Chunk if self.chunk == 0 => {
                Err(Error::InvalidArgument("chunk size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Half-open key range `[lo, hi)` visible from query `i`.
    pub fn key_range(&self, i: usize, len: usize) -> (usize, usize) {
        let (lo, hi) = match self.kind {
            PatternKind::Full => (0, len),
            PatternKind::Window => (i.saturating_sub(self.window), (i + self.window + 1).min(len)),
            PatternKind::Chunk => {
                let start = i / self.chunk * self.chunk;
                (start, (start + self.chunk).min(len))
            }
        };
        if self.causal {
            (lo, hi.min(i + 1))
        } else {
            (lo, hi)
        }
    }

    pub fn allows(&self, i: usize, j: usize, len: usize) -> bool {
        let (lo, hi) = self.key_range(i, len);
        (lo..hi).contains(&j)
    }

    /// Widest key range over all queries of a length-`len` sequence.
    pub fn max_span(&self, len: usize) -> usize {
        match self.kind {
            PatternKind::Full => len,
            PatternKind::Window if self.causal => (self.window + 1).min(len),
            PatternKind::Window => (2 * self.window + 1).min(len),
            PatternKind::Chunk => self.chunk.min(len),
        }
    }

    /// Boolean mask as 0 (allowed) / −∞ (blocked), L × L.
    pub fn additive_mask<T: Real>(&self, len: usize) -> Tensor<T> {
        Tensor::from_fn(&[len, len], |k| {
            if self.allows(k / len, k % len, len) {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }
}

/// Projection weights, row-vector convention (`Q = X·W_q`).
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Real> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Real> AttentionParams<T> {
    /// Gaussian init with standard deviation `1/√d`.
    pub fn random<R: Rng + ?Sized>(d: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d, n_heads)?;
        let std = 1.0 / (d as f64).sqrt();
        Ok(AttentionParams {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], std, rng),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }
}

pub(crate) fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide model width {d}"
        )));
    }
    Ok(())
}

/// How the score computation is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Full L × L scores per head with an additive mask.
    Dense,
    /// Only each query's contiguous key range.
    Banded,
}

/// Attention probabilities kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Probs<T: Real> {
    /// heads × L × stride; row `i` of head `h` holds its key range from offset 0.
    pub values: Tensor<T>,
    pub stride: usize,
    pub layout: Layout,
}

impl<T: Real> Probs<T> {
    /// Sum of each attention row, heads·L entries.
    pub fn row_sums(&self) -> Vec<T> {
        self.values.data().chunks(self.stride).map(|r| r.iter().copied().sum()).collect()
    }
}

struct Dims {
    len: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

fn dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Dims> {
    let (len, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    check_heads(d, heads)?;
    Ok(Dims {
        len,
        d,
        heads,
        dh: d / heads,
    })
}

/// Scaled dot-product attention of already-projected `q, k, v` (L × d),
/// heads concatenated along the feature axis, before the output projection.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    pattern: &LocalityPattern,
    layout: Layout,
) -> Result<(Tensor<T>, Probs<T>)> {
    pattern.validate()?;
    let dm = dims(q, k, v, heads)?;
    match layout {
        Layout::Dense => attend_dense(q, k, v, &dm, pattern),
        Layout::Banded => attend_banded(q, k, v, &dm, pattern),
    }
}

fn attend_dense<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dm: &Dims,
    pattern: &LocalityPattern,
) -> Result<(Tensor<T>, Probs<T>)> {
    let Dims { len, d, heads, dh } = *dm;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = Tensor::zeros(&[heads, len, len]);
    let mut out = vec![T::zero(); len * d];
    let ld = d as isize;
    let ll = len as isize;
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs.data_mut()[h * len * len..(h + 1) * len * len];
        T::gemm_raw(
            len, dh, len, scale,
            &q.data()[off..], ld, 1,
            &k.data()[off..], 1, ld,
            T::zero(), p, ll, 1,
        );
        for (i, row) in p.chunks_mut(len).enumerate() {
            // additive −∞ mask outside the pattern
            let (lo, hi) = pattern.key_range(i, len);
            let (head, tail) = row.split_at_mut(hi);
            head[..lo].iter_mut().chain(tail).for_each(|x| *x = T::neg_infinity());
            if softmax_in_place(row) {
                return Err(Error::Unstable(format!("attention row {i} fully masked")));
            }
        }
        T::gemm_raw(
            len, len, dh, T::one(),
            p, ll, 1,
            &v.data()[off..], ld, 1,
            T::zero(), &mut out[off..], ld, 1,
        );
    }
    Ok((
        Tensor::from_parts(vec![len, d], out),
        Probs {
            values: probs,
            stride: len,
            layout: Layout::Dense,
        },
    ))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn attend_banded<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dm: &Dims,
    pattern: &LocalityPattern,
) -> Result<(Tensor<T>, Probs<T>)> {
    let Dims { len, d, heads, dh } = *dm;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let stride = pattern.max_span(len);
    let mut probs = Tensor::zeros(&[heads, len, stride]);
    let mut out = vec![T::zero(); len * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..len {
            let (lo, hi) = pattern.key_range(i, len);
            let base = (h * len + i) * stride;
            let row = &mut probs.data_mut()[base..base + (hi - lo)];
            let qi = &q.data()[i * d + off..i * d + off + dh];
            for (slot, j) in row.iter_mut().zip(lo..hi) {
                *slot = dot(qi, &k.data()[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(row);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (&p, j) in row.iter().zip(lo..hi) {
                for (o, &vv) in oi.iter_mut().zip(&v.data()[j * d + off..j * d + off + dh]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![len, d], out),
        Probs {
            values: probs,
            stride,
            layout: Layout::Banded,
        },
    ))
}

/// Gradients of [`attend`] with respect to `q`, `k`, `v`.
pub fn attend_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    pattern: &LocalityPattern,
    probs: &Probs<T>,
    grad: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    let dm = dims(q, k, v, heads)?;
    match probs.layout {
        Layout::Dense => Ok(backward_dense(q, k, v, &dm, probs, grad)),
        Layout::Banded => Ok(backward_banded(q, k, v, &dm, pattern, probs, grad)),
    }
}

fn backward_dense<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dm: &Dims,
    probs: &Probs<T>,
    grad: &Tensor<T>,
) -> [Tensor<T>; 3] {
    let Dims { len, d, heads, dh } = *dm;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let ld = d as isize;
    let ll = len as isize;
    let mut dq = vec![T::zero(); len * d];
    let mut dk = vec![T::zero(); len * d];
    let mut dv = vec![T::zero(); len * d];
    let mut dp = Tensor::zeros(&[len, len]);
    let mut ds = Tensor::zeros(&[len, len]);
    for h in 0..heads {
        let off = h * dh;
        let p = &probs.values.data()[h * len * len..(h + 1) * len * len];
        // dV_h = Pᵀ dO_h
        T::gemm_raw(
            len, len, dh, T::one(),
            p, 1, ll,
            &grad.data()[off..], ld, 1,
            T::zero(), &mut dv[off..], ld, 1,
        );
        // dP = dO_h V_hᵀ
        T::gemm_raw(
            len, dh, len, T::one(),
            &grad.data()[off..], ld, 1,
            &v.data()[off..], 1, ld,
            T::zero(), dp.data_mut(), ll, 1,
        );
        ds.data_mut().iter_mut().for_each(|x| *x = T::zero());
        for i in 0..len {
            let r = i * len..(i + 1) * len;
            softmax_backward_row(&p[r.clone()], &dp.data()[r.clone()], &mut ds.data_mut()[r]);
        }
        // dQ_h = dS K_h · scale, dK_h = dSᵀ Q_h · scale
        T::gemm_raw(
            len, len, dh, scale,
            ds.data(), ll, 1,
            &k.data()[off..], ld, 1,
            T::zero(), &mut dq[off..], ld, 1,
        );
        T::gemm_raw(
            len, len, dh, scale,
            ds.data(), 1, ll,
            &q.data()[off..], ld, 1,
            T::zero(), &mut dk[off..], ld, 1,
        );
    }
    let shape = vec![len, d];
    [
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    ]
}

fn backward_banded<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dm: &Dims,
    pattern: &LocalityPattern,
    probs: &Probs<T>,
    grad: &Tensor<T>,
) -> [Tensor<T>; 3] {
    let Dims { len, d, heads, dh } = *dm;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let stride = probs.stride;
    let mut dq = vec![T::zero(); len * d];
    let mut dk = vec![T::zero(); len * d];
    let mut dv = vec![T::zero(); len * d];
    let mut dp = vec![T::zero(); stride];
    let mut ds = vec![T::zero(); stride];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..len {
            let (lo, hi) = pattern.key_range(i, len);
            let span = hi - lo;
            let base = (h * len + i) * stride;
            let p = &probs.values.data()[base..base + span];
            let gi = &grad.data()[i * d + off..i * d + off + dh];
            for (slot, j) in dp[..span].iter_mut().zip(lo..hi) {
                *slot = dot(gi, &v.data()[j * d + off..j * d + off + dh]);
            }
            ds[..span].iter_mut().for_each(|x| *x = T::zero());
            softmax_backward_row(p, &dp[..span], &mut ds[..span]);
            let qi = &q.data()[i * d + off..i * d + off + dh];
            for (t, j) in (lo..hi).enumerate() {
                let s = ds[t] * scale;
                let pj = p[t];
                let kj = j * d + off;
                for c in 0..dh {
                    dq[i * d + off + c] += s * k.data()[kj + c];
                    dk[kj + c] += s * qi[c];
                    dv[kj + c] += pj * gi[c];
                }
            }
        }
    }
    let shape = vec![len, d];
    [
        Tensor::from_parts(shape.clone(), dq),
        Tensor::from_parts(shape.clone(), dk),
        Tensor::from_parts(shape, dv),
    ]
}

struct AttentionOp<T: Real> {
    heads: usize,
    pattern: LocalityPattern,
    probs: Probs<T>,
}

impl<T: Real> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [dq, dk, dv] = attend_backward(
            inputs[0],
            inputs[1],
            inputs[2],
            self.heads,
            &self.pattern,
            &self.probs,
            grad,
        )?;
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

/// Records [`attend`] on the tape.
pub fn record_attend<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    pattern: &LocalityPattern,
    layout: Layout,
) -> Result<Var> {
    let (out, probs) = attend(tape.value(q), tape.value(k), tape.value(v), heads, pattern, layout)?;
    Ok(tape.custom(
        &[q, k, v],
        out,
        Box::new(AttentionOp {
            heads,
            pattern: *pattern,
            probs,
        }),
    ))
}

/// Layout used by the model for a pattern: dense for full attention,
/// banded for window and chunk.
pub fn default_layout(pattern: &LocalityPattern) -> Layout {
    match pattern.kind {
        PatternKind::Full => Layout::Dense,
        _ => Layout::Banded,
    }
}

fn project_and_attend<T: Real>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    pattern: &LocalityPattern,
    layout: Layout,
) -> Result<Tensor<T>> {
    let q = ops::matmul(x, &p.wq)?;
    let k = ops::matmul(x, &p.wk)?;
    let v = ops::matmul(x, &p.wv)?;
    let (heads, _) = attend(&q, &k, &v, p.n_heads, pattern, layout)?;
    ops::matmul(&heads, &p.wo)
}

/// Softmax attention over all positions (lower triangle when causal).
pub fn full_attention<T: Real>(x: &Tensor<T>, p: &AttentionParams<T>, causal: bool) -> Result<Tensor<T>> {
    project_and_attend(x, p, &LocalityPattern::full(causal), Layout::Dense)
}

/// Dense reference: full attention with the pattern as an additive mask.
pub fn masked_attention<T: Real>(x: &Tensor<T>, p: &AttentionParams<T>, pattern: &LocalityPattern) -> Result<Tensor<T>> {
    project_and_attend(x, p, pattern, Layout::Dense)
}

pub fn window_attention_fast<T: Real>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    w: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    project_and_attend(x, p, &LocalityPattern::window(w, causal), Layout::Banded)
}

pub fn chunk_attention_fast<T: Real>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    c: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    project_and_attend(x, p, &LocalityPattern::chunk(c, causal), Layout::Banded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn key_ranges_match_figure_patterns() {
        let w = LocalityPattern::window(2, false);
        assert_eq!(w.key_range(0, 10), (0, 3));
        assert_eq!(w.key_range(5, 10), (3, 8));
        assert_eq!(w.key_range(9, 10), (7, 10));
        let wc = LocalityPattern::window(2, true);
        assert_eq!(wc.key_range(5, 10), (3, 6));
        let c = LocalityPattern::chunk(2, false);
        assert_eq!(c.key_range(0, 5), (0, 2));
        assert_eq!(c.key_range(3, 5), (2, 4));
        assert_eq!(c.key_range(4, 5), (4, 5));
        let cc = LocalityPattern::chunk(4, true);
        assert_eq!(cc.key_range(6, 10), (4, 7));
        assert_eq!(LocalityPattern::full(true).key_range(3, 8), (0, 4));
    }

    #[test]
    fn every_query_sees_itself() {
        for pattern in [
            LocalityPattern::full(true),
            LocalityPattern::window(1, true),
            LocalityPattern::window(3, false),
            LocalityPattern::chunk(1, true),
            LocalityPattern::chunk(5, false),
        ] {
            for i in 0..13 {
                assert!(pattern.allows(i, i, 13));
            }
        }
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(LocalityPattern::window(0, false).validate().is_err());
        assert!(LocalityPattern::chunk(0, true).validate().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::<f32>::random(6, 4, &mut rng).is_err());
        assert!(AttentionParams::<f32>::random(8, 4, &mut rng).is_ok());
    }

    #[test]
    fn single_token_passes_value_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f64>::random(4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let y = full_attention(&x, &p, true).unwrap();
        let want = ops::matmul(&ops::matmul(&x, &p.wv).unwrap(), &p.wo).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn banded_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::<f64>::randn(&[20, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[20, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[20, 8], 1.0, &mut rng);
        let (_, probs) = attend(&q, &k, &v, 2, &LocalityPattern::chunk(6, true), Layout::Banded).unwrap();
        assert_eq!(probs.stride, 6);
        for s in probs.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
