//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / (|analytic| + 1e-8)` seen.
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` maps the input leaves to an output of any shape; the scalar under
/// test is `Σ out ⊙ R` for a fixed random `R`, so every entry of the
/// Jacobian contributes. `step` is the finite-difference half-width.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), want_grads)).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let proj = Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        let r = tape.constant(proj);
        let weighted = tape.mul(out, r)?;
        let loss = tape.sum(weighted);
        let value = tape.value(loss).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| tape.grad(*v).cloned()).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
