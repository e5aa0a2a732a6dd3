//! Causal convolution through the FFT.
//!
//! Signals of length `L` are zero-padded to the next power of two that is at
//! least `2L − 1`, so the circular product equals the linear convolution on
//! the first `L` outputs.

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::real::Real;

use super::Tensor;

/// Transform length used for a causal convolution of length `len`.
pub fn padded_len(len: usize) -> usize {
    (2 * len).saturating_sub(1).max(1).next_power_of_two()
}

/// Forward transform of `x` zero-padded to `n`.
pub fn spectrum<T: Real>(x: &[T], n: usize) -> Vec<Complex<T>> {
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    T::fft_plan(n, false).process(&mut buf);
    buf
}

fn inverse_real<T: Real>(mut buf: Vec<Complex<T>>, len: usize) -> Vec<T> {
    let n = buf.len();
    T::fft_plan(n, true).process(&mut buf);
    let scale = T::one() / T::of(n as f64);
    buf.iter().take(len).map(|c| c.re * scale).collect()
}

/// `out[k] = Σ_{i≤k} kernel[i]·signal[k−i]` for equal-length inputs.
pub fn fft_conv<T: Real>(kernel: &[T], signal: &[T]) -> Result<Vec<T>> {
    if kernel.len() != signal.len() {
        return Err(Error::shape("fft_conv", &[kernel.len()], &[signal.len()]));
    }
    let len = signal.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    let n = padded_len(len);
    let k = spectrum(kernel, n);
    let mut s = spectrum(signal, n);
    for (a, b) in s.iter_mut().zip(&k) {
        *a = *a * *b;
    }
    Ok(inverse_real(s, len))
}

/// Transformed per-channel kernels, reusable across many inputs.
#[derive(Clone, Debug)]
pub struct KernelSpectra<T: Real> {
    len: usize,
    n: usize,
    spectra: Vec<Vec<Complex<T>>>,
}

impl<T: Real> KernelSpectra<T> {
    /// `kernels` is channels × L.
    pub fn new(kernels: &Tensor<T>) -> Result<Self> {
        let (channels, len) = kernels.dims2()?;
        let n = padded_len(len);
        let spectra = (0..channels).map(|c| spectrum(kernels.row(c), n)).collect();
        Ok(KernelSpectra { len, n, spectra })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.spectra.len()
    }

    /// Bytes held by the transformed kernels.
    pub fn bytes(&self) -> usize {
        self.spectra.len() * self.n * 2 * T::BYTES
    }
}

/// Convolves every column of `x` (L × channels) with its channel kernel.
///
/// Two real channels share one complex transform each way.
pub fn conv_channels<T: Real>(x: &Tensor<T>, kernels: &KernelSpectra<T>) -> Result<Tensor<T>> {
    let (len, channels) = x.dims2()?;
    if len != kernels.len || channels != kernels.channels() {
        return Err(Error::shape(
            "conv_channels",
            x.shape(),
            &[kernels.channels(), kernels.len],
        ));
    }
    let n = kernels.n;
    let zero = Complex::new(T::zero(), T::zero());
    let half = T::of(0.5);
    let fwd = T::fft_plan(n, false);
    let inv = T::fft_plan(n, true);
    let scale = T::one() / T::of(n as f64);
    let mut out = vec![T::zero(); len * channels];
    let mut buf = vec![zero; n];
    let mut c = 0;
    while c < channels {
        let pair = c + 1 < channels;
        buf.iter_mut().for_each(|b| *b = zero);
        for t in 0..len {
            buf[t].re = x.data()[t * channels + c];
            if pair {
                buf[t].im = x.data()[t * channels + c + 1];
            }
        }
        fwd.process(&mut buf);
        let ka = &kernels.spectra[c];
        if pair {
            let kb = &kernels.spectra[c + 1];
            let z = buf.clone();
            for k in 0..n {
                let zc = z[(n - k) % n].conj();
                let xa = (z[k] + zc) * half;
                // (z − conj)/(2i) = −i·(z − conj)/2
                let d = (z[k] - zc) * half;
                let xb = Complex::new(d.im, -d.re);
                let ya = ka[k] * xa;
                let yb = kb[k] * xb;
                buf[k] = ya + Complex::new(-yb.im, yb.re);
            }
        } else {
            for k in 0..n {
                buf[k] = buf[k] * ka[k];
            }
        }
        inv.process(&mut buf);
        for t in 0..len {
            out[t * channels + c] = buf[t].re * scale;
            if pair {
                out[t * channels + c + 1] = buf[t].im * scale;
            }
        }
        c += 2;
    }
    Ok(Tensor::from_parts(vec![len, channels], out))
}

/// Adjoint of [`conv_channels`] with respect to its input:
/// `dx[s][c] = Σ_{t≥s} K_c[t−s]·g[t][c]`.
pub fn corr_channels<T: Real>(g: &Tensor<T>, kernels: &KernelSpectra<T>) -> Result<Tensor<T>> {
    let (len, channels) = g.dims2()?;
    let reversed = Tensor::from_fn(&[len, channels], |i| {
        let (t, c) = (i / channels, i % channels);
        g.data()[(len - 1 - t) * channels + c]
    });
    let conv = conv_channels(&reversed, kernels)?;
    Ok(Tensor::from_fn(&[len, channels], |i| {
        let (t, c) = (i / channels, i % channels);
        conv.data()[(len - 1 - t) * channels + c]
    }))
}

/// Gradient of [`conv_channels`] with respect to the kernels:
/// `dK[c][i] = Σ_{t≥i} g[t][c]·x[t−i][c]`, returned as channels × L.
pub fn kernel_grad_channels<T: Real>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if g.shape() != x.shape() {
        return Err(Error::shape("kernel_grad_channels", g.shape(), x.shape()));
    }
    let (len, channels) = x.dims2()?;
    let n = padded_len(len);
    let zero = Complex::new(T::zero(), T::zero());
    let half = T::of(0.5);
    let fwd = T::fft_plan(n, false);
    let inv = T::fft_plan(n, true);
    let scale = T::one() / T::of(n as f64);
    let mut out = vec![T::zero(); channels * len];
    let mut buf = vec![zero; n];
    for c in 0..channels {
        buf.iter_mut().for_each(|b| *b = zero);
        for t in 0..len {
            buf[t] = Complex::new(x.data()[t * channels + c], g.data()[(len - 1 - t) * channels + c]);
        }
        fwd.process(&mut buf);
        let z = buf.clone();
        for k in 0..n {
            let zc = z[(n - k) % n].conj();
            let xs = (z[k] + zc) * half;
            let d = (z[k] - zc) * half;
            let gs = Complex::new(d.im, -d.re);
            buf[k] = xs * gs;
        }
        inv.process(&mut buf);
        for i in 0..len {
            out[c * len + i] = buf[len - 1 - i].re * scale;
        }
    }
    Ok(Tensor::from_parts(vec![channels, len], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(kernel: &[f64], signal: &[f64]) -> Vec<f64> {
        (0..signal.len())
            .map(|k| (0..=k).map(|i| kernel[i] * signal[k - i]).sum())
            .collect()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn padded_lengths() {
        assert_eq!(padded_len(1), 1);
        assert_eq!(padded_len(2), 4);
        assert_eq!(padded_len(3), 8);
        assert_eq!(padded_len(8), 16);
        assert_eq!(padded_len(1000), 2048);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let s = [0.3f64, -1.0, 2.0, 0.25];
        let out = fft_conv(&[1.0, 0.0, 0.0, 0.0], &s).unwrap();
        for (a, b) in out.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_delta_delays_by_one() {
        let s = [0.3f64, -1.0, 2.0, 0.25];
        let out = fft_conv(&[0.0, 1.0, 0.0, 0.0], &s).unwrap();
        let want = [0.0, 0.3, -1.0, 2.0];
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_sum_on_odd_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &len in &[1usize, 2, 3, 8, 64, 1000] {
            let k = random(len, &mut rng);
            let s = random(len, &mut rng);
            let fast = fft_conv(&k, &s).unwrap();
            let slow = direct(&k, &s);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "len {len}: {err}");
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(fft_conv(&[1.0f64, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn channel_paths_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, ch) = (37, 5);
        let kernels = Tensor::<f64>::from_fn(&[ch, len], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::<f64>::from_fn(&[len, ch], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::<f64>::from_fn(&[len, ch], |_| rng.random_range(-1.0..1.0));
        let spectra = KernelSpectra::new(&kernels).unwrap();

        let y = conv_channels(&x, &spectra).unwrap();
        let dx = corr_channels(&g, &spectra).unwrap();
        let dk = kernel_grad_channels(&g, &x).unwrap();
        for c in 0..ch {
            let xc: Vec<f64> = (0..len).map(|t| x.at(t, c)).collect();
            let want = direct(kernels.row(c), &xc);
            for t in 0..len {
                assert!((y.at(t, c) - want[t]).abs() < 1e-10);
                let adj: f64 = (t..len).map(|u| kernels.at(c, u - t) * g.at(u, c)).sum();
                assert!((dx.at(t, c) - adj).abs() < 1e-10);
                let kg: f64 = (t..len).map(|u| g.at(u, c) * x.at(u - t, c)).sum();
                assert!((dk.at(c, t) - kg).abs() < 1e-10);
            }
        }
    }
}
