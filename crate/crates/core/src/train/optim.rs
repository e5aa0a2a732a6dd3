//! Adam with decoupled weight decay, warmup / inverse-square-root learning
//! rate, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate for 1-based `step`: `peak·step/warmup` during warmup,
/// then `peak·√(warmup/step)`.
pub fn lr_at(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f64;
    if step < warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam {
            config,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter that has a gradient.
    ///
    /// Weight decay is decoupled and applies to matrices only (not to
    /// norms, biases or other vectors).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (id, trainable) in ids {
            let Some(g) = &grads[id.index()] else { continue };
            if !trainable {
                continue;
            }
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            if m.shape() != g.shape() {
                return Err(Error::shape("adam gradient", m.shape(), g.shape()));
            }
            let decay = params.value(id).shape().len() == 2;
            let wd = T::of(lr * c.weight_decay);
            let p = params.value_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                if decay {
                    *p -= wd * *p;
                }
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_inverse_sqrt() {
        assert_eq!(lr_at(1, 1e-3, 100), 1e-5);
        assert_eq!(lr_at(50, 2.0, 100), 1.0);
        assert_eq!(lr_at(100, 2.0, 100), 2.0);
        assert!((lr_at(400, 2.0, 100) - 1.0).abs() < 1e-15);
        assert_eq!(lr_at(7, 0.5, 0), 0.5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Tensor::<f64>::full(&[4], 3.0)), None, Some(Tensor::full(&[2, 2], -4.0))];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small = vec![Some(Tensor::<f64>::full(&[1], 0.5))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first Adam step is lr·sign(g)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), true);
        let mut adam = Adam::new(AdamConfig { eps: 0.0, ..AdamConfig::default() }, 1);
        adam.step(&mut store, &[Some(Tensor::new(&[2], vec![0.3, -7.0]).unwrap())], 0.1).unwrap();
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        let init = Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 1e-8]).unwrap();
        let id = store.add("w", init.clone(), true);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::full(&[2, 2], 2.5))], 0.0).unwrap();
        }
        assert_eq!(store.value(id), &init);
    }
}
