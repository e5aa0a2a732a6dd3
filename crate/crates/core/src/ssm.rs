//! Linear state-space layer: HiPPO initialization, bilinear discretization,
//! convolution-kernel materialization, and the two equivalent execution
//! paths (recurrent scan and FFT convolution).
//!
//! Structure shared by all channels: the state matrix `A`, input vector
//! `B` and low-rank factor `P`. Per channel: the output row of `C` and the
//! step size `Δ = exp(log_delta)`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::fft::{self, KernelSpectra};
use crate::tensor::ops::gemm;
use crate::tensor::CustomOp;
use crate::tensor::{Tape, Tensor, Var};

/// Lower and upper bounds of the log-uniform step-size initialization.
pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// Continuous-time parameters `(A, B, C, Δ)` plus the HiPPO factor `P`.
#[derive(Clone, Debug)]
pub struct ContinuousSsm<T: Real> {
    /// d_s × d_s.
    pub a: Tensor<T>,
    pub b: Vec<T>,
    /// channels × d_s.
    pub c: Tensor<T>,
    /// Low-rank correction, `A = A^(d_s) − P Pᵀ`; kept for inspection.
    pub p: Vec<T>,
    pub log_delta: Vec<T>,
    pub trainable: bool,
}

/// The HiPPO matrices before the low-rank correction: `(A^(d_s), P, B)`.
pub fn hippo_matrices(d_state: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let p = DVector::from_fn(d_state, |i, _| (i as f64 + 0.5).sqrt());
    let b = DVector::from_fn(d_state, |i, _| (2.0 * i as f64 + 1.0).sqrt());
    let a_normal = DMatrix::from_fn(d_state, d_state, |i, j| {
        let pij = ((i as f64 + 0.5) * (j as f64 + 0.5)).sqrt();
        match i.cmp(&j) {
            std::cmp::Ordering::Greater => -pij,
            std::cmp::Ordering::Equal => -0.5,
            std::cmp::Ordering::Less => pij,
        }
    });
    (a_normal, p, b)
}

fn to_tensor<T: Real>(m: &DMatrix<f64>) -> Tensor<T> {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |k| T::of(m[(k / m.ncols(), k % m.ncols())]))
}

fn to_dmatrix<T: Real>(t: &Tensor<T>) -> DMatrix<f64> {
    let (r, c) = (t.rows(), t.cols());
    DMatrix::from_fn(r, c, |i, j| t.data()[i * c + j].as_f64())
}

/// HiPPO-initialized SSM with `channels` independent output rows.
///
/// `C ~ Normal(0, 1/d_s)` (variance), `log Δ ~ Uniform(ln 1e-3, ln 1e-1)`.
pub fn hippo_init<T: Real>(d_state: usize, channels: usize, seed: u64) -> Result<ContinuousSsm<T>> {
    if d_state == 0 {
        return Err(Error::InvalidArgument("state size must be at least 1".into()));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument("channel count must be at least 1".into()));
    }
    let (a_normal, p, b) = hippo_matrices(d_state);
    let a = &a_normal - &p * p.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / d_state as f64).sqrt()).expect("valid std");
    let c = Tensor::from_fn(&[channels, d_state], |_| T::of(normal.sample(&mut rng)));
    let log_delta = (0..channels)
        .map(|_| T::of(rng.random_range(DELTA_MIN.ln()..DELTA_MAX.ln())))
        .collect();
    Ok(ContinuousSsm {
        a: to_tensor(&a),
        b: b.iter().map(|&v| T::of(v)).collect(),
        c,
        p: p.iter().map(|&v| T::of(v)).collect(),
        log_delta,
        trainable: false,
    })
}

impl<T: Real> ContinuousSsm<T> {
    /// Assembles an SSM from explicit parts; `P` is left at zero.
    pub fn from_parts(a: Tensor<T>, b: Vec<T>, c: Tensor<T>, log_delta: Vec<T>) -> Result<Self> {
        let (n, n2) = a.dims2()?;
        let (channels, cn) = c.dims2()?;
        if n != n2 || b.len() != n || cn != n {
            return Err(Error::shape("ssm parts", a.shape(), c.shape()));
        }
        if log_delta.len() != channels {
            return Err(Error::shape("ssm log_delta", &[log_delta.len()], &[channels]));
        }
        Ok(ContinuousSsm {
            a,
            b,
            c,
            p: vec![T::zero(); n],
            log_delta,
            trainable: false,
        })
    }

    pub fn d_state(&self) -> usize {
        self.b.len()
    }

    pub fn channels(&self) -> usize {
        self.log_delta.len()
    }

    pub fn delta(&self, channel: usize) -> f64 {
        self.log_delta[channel].as_f64().exp()
    }

    /// Largest eigenvalue of `(A + Aᵀ)/2`.
    pub fn symmetric_part_max_eigenvalue(&self) -> f64 {
        let a = to_dmatrix(&self.a);
        let sym = (&a + a.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.max()
    }

    /// Bilinear discretization for one channel:
    /// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹ Δ B`, `C̄ = C`.
    pub fn discretize(&self, channel: usize) -> Result<DiscreteSsm<T>> {
        if channel >= self.channels() {
            return Err(Error::InvalidArgument(format!(
                "channel {channel} out of range ({} channels)",
                self.channels()
            )));
        }
        let delta = self.delta(channel);
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidArgument(format!("step size {delta} must be positive")));
        }
        let a = to_dmatrix(&self.a);
        let b = DVector::from_iterator(self.d_state(), self.b.iter().map(|v| v.as_f64()));
        let bilinear = Bilinear::new(&a, delta)?;
        Ok(DiscreteSsm {
            a_bar: to_tensor(&bilinear.a_bar),
            b_bar: bilinear.b_bar(&b).iter().map(|&v| T::of(v)).collect(),
            c_bar: self.c.row(channel).to_vec(),
        })
    }

    /// Kernels of every channel, channels × `len`.
    pub fn kernel(&self, len: usize) -> Result<SsmKernel<T>> {
        let mut values = Vec::with_capacity(self.channels() * len);
        for ch in 0..self.channels() {
            values.extend(self.discretize(ch)?.materialize_kernel(len)?);
        }
        Ok(SsmKernel {
            values: Tensor::new(&[self.channels(), len], values)?,
        })
    }
}

/// `(I − Δ/2·A)` factorized once, with `Ā` formed from it.
struct Bilinear {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    a_bar: DMatrix<f64>,
    delta: f64,
}

impl Bilinear {
    fn new(a: &DMatrix<f64>, delta: f64) -> Result<Self> {
        let n = a.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let lhs = &eye - a * (delta / 2.0);
        let rhs = &eye + a * (delta / 2.0);
        let lu = lhs.lu();
        let pivots = lu.u().diagonal().map(f64::abs);
        let (lo, hi) = (pivots.min(), pivots.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition.is_finite() && condition < 1e14) {
            return Err(Error::Singular {
                context: "bilinear discretization",
                condition,
            });
        }
        let a_bar = lu.solve(&rhs).ok_or(Error::Singular {
            context: "bilinear discretization",
            condition,
        })?;
        Ok(Bilinear { lu, a_bar, delta })
    }

    fn b_bar(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(&(b * self.delta)).expect("factorization checked in new")
    }
}

/// Discrete recurrence `x_k = Ā x_{k−1} + B̄ u_k`, `y_k = C̄ x_k` for one channel.
#[derive(Clone, Debug)]
pub struct DiscreteSsm<T: Real> {
    pub a_bar: Tensor<T>,
    pub b_bar: Vec<T>,
    pub c_bar: Vec<T>,
}

impl<T: Real> DiscreteSsm<T> {
    pub fn from_parts(a_bar: Tensor<T>, b_bar: Vec<T>, c_bar: Vec<T>) -> Result<Self> {
        let (n, n2) = a_bar.dims2()?;
        if n != n2 || b_bar.len() != n || c_bar.len() != n {
            return Err(Error::shape("discrete ssm", a_bar.shape(), &[b_bar.len(), c_bar.len()]));
        }
        Ok(DiscreteSsm { a_bar, b_bar, c_bar })
    }

    pub fn d_state(&self) -> usize {
        self.b_bar.len()
    }

    fn apply_a(&self, v: &[T], out: &mut [T]) {
        let n = self.d_state();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.a_bar.data()[i * n..(i + 1) * n]
                .iter()
                .zip(v)
                .map(|(&a, &x)| a * x)
                .sum();
        }
    }

    fn readout(&self, v: &[T]) -> T {
        self.c_bar.iter().zip(v).map(|(&c, &x)| c * x).sum()
    }

    /// `K̄[i] = C̄ Āⁱ B̄` for `i < len`, by the state recursion `v_{i+1} = Ā v_i`.
    pub fn materialize_kernel(&self, len: usize) -> Result<Vec<T>> {
        if len == 0 {
            return Err(Error::InvalidArgument("kernel length must be at least 1".into()));
        }
        let mut v = self.b_bar.clone();
        let mut next = vec![T::zero(); v.len()];
        let mut out = Vec::with_capacity(len);
        let limit = T::max_value().sqrt();
        for i in 0..len {
            let k = self.readout(&v);
            if !k.is_finite() || v.iter().any(|x| !(x.abs() < limit)) {
                return Err(Error::Unstable(format!("kernel state overflowed at index {i}")));
            }
            out.push(k);
            self.apply_a(&v, &mut next);
            std::mem::swap(&mut v, &mut next);
        }
        Ok(out)
    }

    /// Runs the recurrence from a zero initial state.
    pub fn scan(&self, u: &[T]) -> Result<Vec<T>> {
        let n = self.d_state();
        let mut x = vec![T::zero(); n];
        let mut next = vec![T::zero(); n];
        let mut y = Vec::with_capacity(u.len());
        for (k, &uk) in u.iter().enumerate() {
            self.apply_a(&x, &mut next);
            for (xi, (&ni, &bi)) in x.iter_mut().zip(next.iter().zip(&self.b_bar)) {
                *xi = ni + bi * uk;
            }
            let yk = self.readout(&x);
            if !yk.is_finite() {
                return Err(Error::Unstable(format!("scan diverged at step {k}")));
            }
            y.push(yk);
        }
        Ok(y)
    }
}

/// Materialized convolution kernels, channels × L.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel<T: Real> {
    pub values: Tensor<T>,
}

impl<T: Real> SsmKernel<T> {
    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        self.values.row(c)
    }

    /// Writes `channel,index,value` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "index", "value"])?;
        for c in 0..self.channels() {
            for (i, v) in self.channel(c).iter().enumerate() {
                w.write_record([c.to_string(), i.to_string(), format!("{:e}", v.as_f64())])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Non-differentiable forward pass: every column of `x` (L × channels)
/// through its channel's kernel via FFT convolution.
pub fn ssm_forward<T: Real>(params: &ContinuousSsm<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (len, d) = x.dims2()?;
    if d != params.channels() {
        return Err(Error::shape("ssm_forward", x.shape(), &[params.channels()]));
    }
    let kernel = params.kernel(len)?;
    let spectra = KernelSpectra::new(&kernel.values)?;
    fft::conv_channels(x, &spectra)
}

/// Upper bound on the spectral radius from Gelfand's formula,
/// `ρ(M) ≤ ‖M^(2^k)‖^(1/2^k)`, minimized over repeated squarings.
///
/// Each squaring is renormalized, so the bound is free of overflow and
/// underflow even for highly non-normal matrices.
pub fn spectral_radius_bound<T: Real>(m: &Tensor<T>, squarings: usize) -> f64 {
    let mut cur = to_dmatrix(m);
    let mut log_scale = 0.0f64;
    let mut best = f64::INFINITY;
    let mut power = 1.0f64;
    for _ in 0..=squarings {
        let norm = cur.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        best = best.min(((norm.ln() + log_scale) / power).exp());
        cur /= norm;
        log_scale += norm.ln();
        cur = &cur * &cur;
        log_scale *= 2.0;
        power *= 2.0;
    }
    best
}

/// Power-iteration estimate of the spectral radius (growth rate of
/// `‖Mᵏ v‖` over the final `iters/2` steps).
pub fn spectral_radius_power<T: Real>(m: &Tensor<T>, iters: usize, seed: u64) -> f64 {
    let a = to_dmatrix(m);
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    v /= v.norm();
    let burn = iters / 2;
    let mut log_growth = 0.0;
    for k in 0..iters.max(2) {
        let w = &a * &v;
        let g = w.norm();
        if g == 0.0 {
            return 0.0;
        }
        if k >= burn {
            log_growth += g.ln();
        }
        v = w / g;
    }
    (log_growth / (iters.max(2) - burn) as f64).exp()
}

/// Memoized kernels and their spectra, keyed by `(parameter version, L)`.
pub struct KernelCache<T: Real> {
    entries: RwLock<HashMap<(u64, usize), Arc<CachedKernel<T>>>>,
}

pub struct CachedKernel<T: Real> {
    pub kernel: Tensor<T>,
    pub spectra: Arc<KernelSpectra<T>>,
}

impl<T: Real> Default for KernelCache<T> {
    fn default() -> Self {
        KernelCache {
            entries: RwLock::new(HashMap::new()),
        }
    }
}

impl<T: Real> Clone for KernelCache<T> {
    fn clone(&self) -> Self {
        KernelCache {
            entries: RwLock::new(self.entries.read().expect("kernel cache poisoned").clone()),
        }
    }
}

impl<T: Real> std::fmt::Debug for KernelCache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.entries.read().map(|e| e.len()).unwrap_or(0);
        f.debug_struct("KernelCache").field("entries", &n).finish()
    }
}

impl<T: Real> KernelCache<T> {
    pub fn get_or_compute(
        &self,
        version: u64,
        len: usize,
        params: &ContinuousSsm<T>,
    ) -> Result<Arc<CachedKernel<T>>> {
        if let Some(hit) = self.entries.read().expect("kernel cache poisoned").get(&(version, len)) {
            return Ok(Arc::clone(hit));
        }
        // Kernel memory is not charged to whichever thread happens to fill the cache.
        let kernel = params.kernel(len)?.values;
        let spectra = Arc::new(KernelSpectra::new(&kernel)?);
        let entry = Arc::new(CachedKernel { kernel, spectra });
        let mut map = self.entries.write().expect("kernel cache poisoned");
        map.retain(|(v, _), _| *v == version);
        Ok(Arc::clone(map.entry((version, len)).or_insert(entry)))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("kernel cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().expect("kernel cache poisoned").clear();
    }
}

/// Records the per-channel causal convolution `y[:, c] = K_c ∗ x[:, c]`.
///
/// `kernel` is channels × L; `spectra` must be its transform.
pub fn record_causal_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    spectra: Arc<KernelSpectra<T>>,
) -> Result<Var> {
    let out = fft::conv_channels(tape.value(x), &spectra)?;
    Ok(tape.custom(&[x, kernel], out, Box::new(CausalConvOp { spectra })))
}

struct CausalConvOp<T: Real> {
    spectra: Arc<KernelSpectra<T>>,
}

impl<T: Real> CustomOp<T> for CausalConvOp<T> {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let dx = if needs[0] {
            Some(fft::corr_channels(grad, &self.spectra)?)
        } else {
            None
        };
        let dk = if needs[1] {
            Some(fft::kernel_grad_channels(grad, inputs[0])?)
        } else {
            None
        };
        Ok(vec![dx, dk])
    }
}

/// Records kernel materialization as a differentiable function of the
/// per-channel readout rows `c` (channels × d_s) and `log_delta` (channels),
/// with `A` and `B` held fixed. Returns a channels × `len` kernel.
pub fn record_kernel<T: Real>(
    tape: &mut Tape<T>,
    a: &Tensor<T>,
    b: &[T],
    c: Var,
    log_delta: Var,
    len: usize,
) -> Result<Var> {
    let a64 = to_dmatrix(a);
    let b64 = DVector::from_iterator(b.len(), b.iter().map(|v| v.as_f64()));
    let cv = tape.value(c);
    let (channels, n) = cv.dims2()?;
    if n != b.len() || tape.value(log_delta).len() != channels {
        return Err(Error::shape("ssm kernel", cv.shape(), tape.value(log_delta).shape()));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("kernel length must be at least 1".into()));
    }
    let mut out = vec![T::zero(); channels * len];
    let mut saved = Vec::with_capacity(channels);
    for ch in 0..channels {
        let delta = tape.value(log_delta).data()[ch].as_f64().exp();
        let bil = Bilinear::new(&a64, delta)?;
        let b_bar = bil.b_bar(&b64);
        let crow: Vec<f64> = cv.row(ch).iter().map(|v| v.as_f64()).collect();
        // states[i] = Āⁱ B̄, row-major len × n
        let mut states = vec![0.0f64; len * n];
        states[..n].copy_from_slice(b_bar.as_slice());
        for i in 1..len {
            let (prev, cur) = states.split_at_mut(i * n);
            let prev = &prev[(i - 1) * n..];
            for (r, slot) in cur[..n].iter_mut().enumerate() {
                *slot = (0..n).map(|k| bil.a_bar[(r, k)] * prev[k]).sum();
            }
        }
        for i in 0..len {
            let k: f64 = states[i * n..(i + 1) * n].iter().zip(&crow).map(|(s, c)| s * c).sum();
            if !k.is_finite() {
                return Err(Error::Unstable(format!("kernel overflowed at index {i}")));
            }
            out[ch * len + i] = T::of(k);
        }
        saved.push(ChannelState {
            bilinear: bil,
            b_bar,
            crow,
            states,
        });
    }
    let kernel = Tensor::from_parts(vec![channels, len], out);
    Ok(tape.custom(
        &[c, log_delta],
        kernel,
        Box::new(KernelOp {
            a: a64,
            b: b64,
            len,
            saved,
        }),
    ))
}

struct ChannelState {
    bilinear: Bilinear,
    b_bar: DVector<f64>,
    crow: Vec<f64>,
    states: Vec<f64>,
}

struct KernelOp {
    a: DMatrix<f64>,
    b: DVector<f64>,
    len: usize,
    saved: Vec<ChannelState>,
}

impl<T: Real> CustomOp<T> for KernelOp {
    fn name(&self) -> &'static str {
        "ssm_kernel"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let channels = self.saved.len();
        let n = self.b.len();
        let len = self.len;
        let mut dc = vec![T::zero(); channels * n];
        let mut dlog = vec![T::zero(); channels];
        let half_a = &self.a * 0.5;
        let eye = DMatrix::<f64>::identity(n, n);
        for (ch, st) in self.saved.iter().enumerate() {
            let g: Vec<f64> = grad.row(ch).iter().map(|v| v.as_f64()).collect();
            // dC = Σ_i g_i · Āⁱ B̄
            let mut dcrow = vec![0.0f64; n];
            gemm(1, len, n, &g, false, &st.states, false, 0.0, &mut dcrow);
            for (d, v) in dc[ch * n..(ch + 1) * n].iter_mut().zip(&dcrow) {
                *d = T::of(*v);
            }
            if !needs[1] {
                continue;
            }
            // adjoint recursion λ_i = g_i C + Āᵀ λ_{i+1}
            let a_bar = &st.bilinear.a_bar;
            let mut lambdas = vec![0.0f64; len * n];
            let mut next = vec![0.0f64; n];
            for i in (0..len).rev() {
                let row = &mut lambdas[i * n..(i + 1) * n];
                for (r, slot) in row.iter_mut().enumerate() {
                    let back: f64 = if i + 1 < len {
                        (0..n).map(|k| a_bar[(k, r)] * next[k]).sum()
                    } else {
                        0.0
                    };
                    *slot = g[i] * st.crow[r] + back;
                }
                next.copy_from_slice(row);
            }
            // G_Ā = Σ_{i<len−1} λ_{i+1} v_iᵀ, G_B̄ = λ_0
            let mut grad_a = vec![0.0f64; n * n];
            if len > 1 {
                gemm(n, len - 1, n, &lambdas[n..], true, &st.states[..(len - 1) * n], false, 0.0, &mut grad_a);
            }
            let grad_a = DMatrix::from_row_slice(n, n, &grad_a);
            let grad_b = DVector::from_row_slice(&lambdas[..n]);
            let da_dd = st
                .bilinear
                .lu
                .solve(&(&half_a * (&eye + a_bar)))
                .expect("factorization checked in forward");
            let db_dd = st
                .bilinear
                .lu
                .solve(&(&self.b + &half_a * &st.b_bar))
                .expect("factorization checked in forward");
            let d_delta = grad_a.dot(&da_dd) + grad_b.dot(&db_dd);
            dlog[ch] = T::of(d_delta * st.bilinear.delta);
        }
        let dc = needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), dc));
        let dlog = needs[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), dlog));
        Ok(vec![dc, dlog])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hippo_reference_entries() {
        let ssm = hippo_init::<f64>(4, 2, 0).unwrap();
        assert_eq!(ssm.b[0], 1.0);
        assert!((ssm.b[1] - 1.732_050_8).abs() < 1e-7);
        assert!((ssm.p[0] - 0.5f64.sqrt()).abs() < 1e-7);
        let (a_normal, _, _) = hippo_matrices(4);
        assert_eq!(a_normal[(0, 0)], -0.5);
        assert!((ssm.a.at(0, 0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hippo_a_is_lower_triangular_legs() {
        // A − (−(2i+1)^½(2j+1)^½ below, −(i+1) on the diagonal, 0 above)
        let ssm = hippo_init::<f64>(6, 1, 3).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = match i.cmp(&j) {
                    std::cmp::Ordering::Greater => -((2 * i + 1) as f64 * (2 * j + 1) as f64).sqrt(),
                    std::cmp::Ordering::Equal => -(i as f64 + 1.0),
                    std::cmp::Ordering::Less => 0.0,
                };
                assert!((ssm.a.at(i, j) - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn hippo_rejects_zero_state() {
        assert!(hippo_init::<f32>(0, 4, 0).is_err());
    }

    #[test]
    fn delta_initialization_range() {
        let ssm = hippo_init::<f64>(4, 64, 9).unwrap();
        for ch in 0..64 {
            let d = ssm.delta(ch);
            assert!((DELTA_MIN..=DELTA_MAX).contains(&d));
        }
    }

    #[test]
    fn scalar_discretization() {
        let ssm = ContinuousSsm::from_parts(mat(&[vec![-1.0]]), vec![1.0], mat(&[vec![1.0]]), vec![2f64.ln()]).unwrap();
        let d = ssm.discretize(0).unwrap();
        assert!(d.a_bar.at(0, 0).abs() < 1e-15);
        assert!((d.b_bar[0] - 1.0).abs() < 1e-15);
        assert_eq!(d.c_bar, vec![1.0]);
    }

    #[test]
    fn zero_a_discretizes_to_identity() {
        let delta = 0.37f64;
        let ssm = ContinuousSsm::from_parts(
            Tensor::zeros(&[3, 3]),
            vec![1.0, -2.0, 0.5],
            mat(&[vec![1.0, 1.0, 1.0]]),
            vec![delta.ln()],
        )
        .unwrap();
        let d = ssm.discretize(0).unwrap();
        assert!(d.a_bar.max_abs_diff(&Tensor::identity(3)) < 1e-15);
        for (bb, b) in d.b_bar.iter().zip([1.0, -2.0, 0.5]) {
            assert!((bb - delta * b).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_system_is_detected() {
        // I − Δ/2·A = 0 when A = (2/Δ)·I
        let ssm = ContinuousSsm::from_parts(mat(&[vec![2.0]]), vec![1.0], mat(&[vec![1.0]]), vec![0.0]).unwrap();
        assert!(matches!(ssm.discretize(0), Err(Error::Singular { .. })));
    }

    #[test]
    fn geometric_kernel_for_scalar_system() {
        let d = DiscreteSsm::from_parts(mat(&[vec![0.5]]), vec![2.0], vec![3.0]).unwrap();
        let k = d.materialize_kernel(5).unwrap();
        assert_eq!(k, vec![6.0, 3.0, 1.5, 0.75, 0.375]);
        let zero = DiscreteSsm::from_parts(mat(&[vec![0.0]]), vec![2.0], vec![3.0]).unwrap();
        assert_eq!(zero.materialize_kernel(4).unwrap(), vec![6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_overflow_is_reported() {
        let d = DiscreteSsm::from_parts(mat(&[vec![1e200]]), vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(d.materialize_kernel(8), Err(Error::Unstable(_))));
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let ssm = hippo_init::<f64>(8, 1, 5).unwrap();
        let d = ssm.discretize(0).unwrap();
        let mut u = vec![0.0; 20];
        u[0] = 1.0;
        let y = d.scan(&u).unwrap();
        let k = d.materialize_kernel(20).unwrap();
        for (a, b) in y.iter().zip(&k) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(d.scan(&[0.0; 10]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_bounds_on_known_matrix() {
        // upper triangular, eigenvalues 0.9 and −0.5, strongly non-normal
        let m = mat(&[vec![0.9, 50.0], vec![0.0, -0.5]]);
        let bound = spectral_radius_bound(&m, 20);
        assert!((0.9 - 1e-9..0.91).contains(&bound), "{bound}");
        let est = spectral_radius_power(&m, 400, 1);
        assert!((est - 0.9).abs() < 1e-3, "{est}");
    }

    #[test]
    fn kernel_csv_has_header_and_rows() {
        let ssm = hippo_init::<f32>(4, 2, 1).unwrap();
        let k = ssm.kernel(3).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "channel,index,value");
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[4].starts_with("1,0,"));
    }

    #[test]
    fn cache_hits_and_invalidates_on_version() {
        let ssm = hippo_init::<f32>(4, 3, 1).unwrap();
        let cache = KernelCache::default();
        let a = cache.get_or_compute(0, 16, &ssm).unwrap();
        let b = cache.get_or_compute(0, 16, &ssm).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get_or_compute(0, 32, &ssm).unwrap();
        assert_eq!(cache.len(), 2);
        cache.get_or_compute(1, 16, &ssm).unwrap();
        assert_eq!(cache.len(), 1);
    }
}
