use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::ops::{self, gemm};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector–Jacobian product of an operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the
/// upstream gradient, and returns one optional gradient per input (`None`
/// when the input needs none).
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    MeanRows(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Dropout { .. } => "dropout",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode recording of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. [`Tape::backward`] may run once; afterwards the tape only answers
/// value and gradient queries.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a row vector (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (m, n) = x.dims2()?;
        if r.len() != n {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let data = (0..m * n).map(|i| x.data()[i] + r.data()[i % n]).collect();
        let out = Tensor::from_parts(vec![m, n], data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row softmax with an optional additive mask (−∞ entries give 0).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a), mask)?.probs;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let f = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            f.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: f.xhat,
                rstd: f.rstd,
            },
            rg,
        ))
    }

    /// `[a, b]` along the last (feature) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, p) = x.dims2()?;
        let (m2, q) = y.dims2()?;
        if m != m2 {
            return Err(Error::shape("concat_cols", x.shape(), y.shape()));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let out = Tensor::from_parts(vec![m, p + q], data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Gathers rows of `table` (vocab × d).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { token: id, vocab });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs, count) = ops::cross_entropy(self.value(logits), targets)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column means, shape 1 × n.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2()?;
        let inv = T::one() / T::of(m as f64);
        let mut data = vec![T::zero(); n];
        for i in 0..m {
            for (d, &v) in data.iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let out = Tensor::from_parts(vec![1, n], data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate`, scales the
    /// rest by `1/(1−rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(a);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { x: a, mask }, rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss` to every leaf that requires a
    /// gradient. Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(shape, vec![T::one()]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).cols();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, T::zero(), &mut da);
                    accumulate(grads, *a, vec![m, k], da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, T::zero(), &mut db);
                    accumulate(grads, *b, vec![k, n], db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).rows();
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), false, T::zero(), &mut da);
                    accumulate(grads, *a, vec![m, k], da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm(n, m, k, g.data(), true, val(*a).data(), false, T::zero(), &mut db);
                    accumulate(grads, *b, vec![n, k], db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.shape().to_vec(), g.data().to_vec());
                    }
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    accumulate(grads, *a, g.shape().to_vec(), g.data().to_vec());
                }
                if needs(*r) {
                    let n = g.cols();
                    let mut dr = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in dr.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *r, val(*r).shape().to_vec(), dr);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, g.shape().to_vec(), d);
                }
                if needs(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, g.shape().to_vec(), d);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|&x| x * *s).collect();
                accumulate(grads, *a, g.shape().to_vec(), d);
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gg, &x)| gg * ops::gelu_grad(x))
                    .collect();
                accumulate(grads, *a, g.shape().to_vec(), d);
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gg, &x)| if x > T::zero() { gg } else { T::zero() })
                    .collect();
                accumulate(grads, *a, g.shape().to_vec(), d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(d.chunks_mut(n)) {
                    ops::softmax_backward_row(yr, gr, dr);
                }
                accumulate(grads, *a, g.shape().to_vec(), d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = g.dims2()?;
                let gn = val(*gain).data();
                if needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] += g.data()[i * d + j] * xhat[i * d + j];
                        }
                    }
                    accumulate(grads, *gain, val(*gain).shape().to_vec(), dg);
                }
                if needs(*bias) {
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (b, &v) in db.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    accumulate(grads, *bias, val(*bias).shape().to_vec(), db);
                }
                if needs(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); m * d];
                    for i in 0..m {
                        let gr = &g.data()[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            dx[i * d + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, vec![m, d], dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = val(*a).dims2()?;
                let q = val(*b).cols();
                if needs(*a) {
                    let mut d = Vec::with_capacity(m * p);
                    for i in 0..m {
                        d.extend_from_slice(&g.row(i)[..p]);
                    }
                    accumulate(grads, *a, vec![m, p], d);
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(m * q);
                    for i in 0..m {
                        d.extend_from_slice(&g.row(i)[p..]);
                    }
                    accumulate(grads, *b, vec![m, q], d);
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = val(*table).dims2()?;
                let mut dt = vec![T::zero(); vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *t += v;
                    }
                }
                accumulate(grads, *table, vec![vocab, d], dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, v) = val(*logits).dims2()?;
                let mut d = vec![T::zero(); m * v];
                if *count > 0 {
                    let s = g.data()[0] / T::of(*count as f64);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                d[i * v + j] = probs[i * v + j] * s;
                            }
                            d[i * v + t] -= s;
                        }
                    }
                }
                accumulate(grads, *logits, vec![m, v], d);
            }
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(grads, *a, x.shape().to_vec(), vec![g.data()[0]; x.len()]);
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2()?;
                let inv = T::one() / T::of(m as f64);
                let d = (0..m * n).map(|i| g.data()[i % n] * inv).collect();
                accumulate(grads, *a, vec![m, n], d);
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&a, &b)| a * b).collect();
                accumulate(grads, *x, g.shape().to_vec(), d);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let flags: Vec<bool> = inputs.iter().map(|v| needs(*v)).collect();
                let out = op.backward(&values, &node.value, g, &flags)?;
                if out.len() != inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                for ((v, dg), need) in inputs.iter().zip(out).zip(flags) {
                    if let (Some(dg), true) = (dg, need) {
                        if dg.shape() != val(*v).shape() {
                            return Err(Error::shape(op.name(), dg.shape(), val(*v).shape()));
                        }
                        add_grad(grads, *v, dg);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: Vec<usize>, data: Vec<T>) {
    add_grad(grads, v, Tensor::from_parts(shape, data));
}

fn add_grad<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
