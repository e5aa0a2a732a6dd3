//! The layer stack: embedding, global / local / SSM layers, heads.
//!
//! A global layer computes, from one normalized input `N = LN(X)`,
//!
//! ```text
//! X_local  = Local(N)
//! X_global = SSM(N)
//! X_a      = [LN(X_local), LN(X_global)]·W + X
//! Y        = FFN(LN(X_a)) + X_a
//! ```
//!
//! Local layers are pre-norm transformer blocks with a local attention
//! pattern. No positional embedding exists anywhere; order information
//! comes from causal masking and the SSM recurrence.

mod checkpoint;
mod config;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, default_layout};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::ssm::{self, ContinuousSsm, KernelCache};
use crate::tensor::fft::KernelSpectra;
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{Architecture, LayerKind, ModelConfig, Placement};
pub use params::{Param, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
/// Initial scale of the SSM half of the combiner.
const GLOBAL_COMBINE_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Next-token logits, L × vocab.
    Lm,
    /// Class logits from mean-pooled final states, 1 × classes.
    Classify,
}

/// Supervision for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    /// One optional next-token target per position.
    Tokens(Vec<Option<usize>>),
    Class(usize),
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct SsmBlock<T: Real> {
    a: ParamId,
    b: ParamId,
    p: ParamId,
    c: ParamId,
    log_delta: ParamId,
    cache: Arc<KernelCache<T>>,
}

#[derive(Clone, Debug)]
enum Layer<T: Real> {
    Global {
        ln_in: Norm,
        ln_local: Norm,
        ln_global: Norm,
        ln_ffn: Norm,
        attn: Attn,
        ssm: SsmBlock<T>,
        combine: ParamId,
        ffn: Ffn,
    },
    Local {
        ln_in: Norm,
        ln_ffn: Norm,
        attn: Attn,
        ffn: Ffn,
    },
    Ssm {
        ln_in: Norm,
        ln_ffn: Norm,
        ssm: SsmBlock<T>,
        out: ParamId,
        ffn: Ffn,
    },
}

/// Embedding, layer stack, final norm and heads.
#[derive(Clone, Debug)]
pub struct SpadeModel<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: ParamId,
    layers: Vec<Layer<T>>,
    ln_final: Norm,
    lm_head: Option<ParamId>,
    classifier: Option<(ParamId, ParamId)>,
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<T: Real> Builder<'_, T> {
    fn name(&self, local: &str) -> String {
        format!("{}{}", self.prefix, local)
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(self.name(&format!("{name}.gain")), Tensor::full(&[d], T::one()), true),
            bias: self.store.add(self.name(&format!("{name}.bias")), Tensor::zeros(&[d]), true),
        }
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let w = Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut self.rng);
        self.store.add(self.name(name), w, true)
    }

    fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.store.add(self.name(name), Tensor::zeros(&[n]), true)
    }

    fn attn(&mut self, d: usize) -> Attn {
        Attn {
            wq: self.linear("attn.wq", d, d),
            wk: self.linear("attn.wk", d, d),
            wv: self.linear("attn.wv", d, d),
            wo: self.linear("attn.wo", d, d),
        }
    }

    fn ffn(&mut self, d: usize, hidden: usize) -> Ffn {
        Ffn {
            w1: self.linear("ffn.w1", d, hidden),
            b1: self.bias("ffn.b1", hidden),
            w2: self.linear("ffn.w2", hidden, d),
            b2: self.bias("ffn.b2", d),
        }
    }

    fn ssm(&mut self, cfg: &ModelConfig, seed: u64) -> Result<SsmBlock<T>> {
        let init = ssm::hippo_init::<T>(cfg.d_state, cfg.d, seed)?;
        let n = cfg.d_state;
        let t = cfg.ssm_trainable;
        Ok(SsmBlock {
            a: self.store.add(self.name("ssm.a"), init.a, false),
            b: self.store.add(self.name("ssm.b"), Tensor::new(&[n], init.b)?, false),
            p: self.store.add(self.name("ssm.p"), Tensor::new(&[n], init.p)?, false),
            c: self.store.add(self.name("ssm.c"), init.c, t),
            log_delta: self.store.add(self.name("ssm.log_delta"), Tensor::new(&[cfg.d], init.log_delta)?, t),
            cache: Arc::new(KernelCache::default()),
        })
    }
}

impl<T: Real> SpadeModel<T> {
    /// Randomly initialized model; identical configs give identical weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let hidden = config.ffn_width();
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(mix(config.seed, 0)),
            prefix: String::new(),
        };
        let e = Tensor::randn(&[config.vocab, d], 1.0 / (d as f64).sqrt(), &mut b.rng);
        let embed = b.store.add("embed", e, true);

        let mut layers = Vec::with_capacity(config.depth);
        for (i, kind) in config.layer_kinds()?.into_iter().enumerate() {
            let tag = 1 + i as u64 * 4
                + match kind {
                    LayerKind::Global => 1,
                    LayerKind::Local => 2,
                    LayerKind::Ssm => 3,
                };
            let mut lb = Builder {
                store: &mut *b.store,
                rng: ChaCha8Rng::seed_from_u64(mix(config.seed, tag)),
                prefix: format!("layers.{i}."),
            };
            let layer = match kind {
                LayerKind::Global => {
                    let ln_in = lb.norm("ln_in", d);
                    let ln_local = lb.norm("ln_local", d);
                    let ln_global = lb.norm("ln_global", d);
                    let ln_ffn = lb.norm("ln_ffn", d);
                    let attn = lb.attn(d);
                    let ssm = lb.ssm(&config, mix(config.seed, tag ^ 0xabcd))?;
                    let combine = lb.linear("combine", 2 * d, d);
                    lb.store.scale_rows(combine, d.., T::of(GLOBAL_COMBINE_SCALE));
                    let ffn = lb.ffn(d, hidden);
                    Layer::Global {
                        ln_in,
                        ln_local,
                        ln_global,
                        ln_ffn,
                        attn,
                        ssm,
                        combine,
                        ffn,
                    }
                }
                LayerKind::Local => Layer::Local {
                    ln_in: lb.norm("ln_in", d),
                    ln_ffn: lb.norm("ln_ffn", d),
                    attn: lb.attn(d),
                    ffn: lb.ffn(d, hidden),
                },
                LayerKind::Ssm => {
                    let ln_in = lb.norm("ln_in", d);
                    let ln_ffn = lb.norm("ln_ffn", d);
                    let ssm = lb.ssm(&config, mix(config.seed, tag ^ 0xabcd))?;
                    let out = lb.linear("ssm_out", d, d);
                    let ffn = lb.ffn(d, hidden);
                    Layer::Ssm {
                        ln_in,
                        ln_ffn,
                        ssm,
                        out,
                        ffn,
                    }
                }
            };
            layers.push(layer);
        }
        let mut hb = Builder {
            store: &mut *b.store,
            rng: ChaCha8Rng::seed_from_u64(mix(config.seed, u64::MAX)),
            prefix: String::new(),
        };
        let ln_final = hb.norm("ln_final", d);
        let lm_head = (!config.tie_embeddings).then(|| hb.linear("lm_head", d, config.vocab));
        let classifier = (config.classes > 0).then(|| {
            (
                hb.linear("classifier.w", d, config.classes),
                hb.bias("classifier.b", config.classes),
            )
        });
        Ok(SpadeModel {
            config,
            params: store,
            embed,
            layers,
            ln_final,
            lm_head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Global { .. } => LayerKind::Global,
                Layer::Local { .. } => LayerKind::Local,
                Layer::Ssm { .. } => LayerKind::Ssm,
            })
            .collect()
    }

    /// Indices of layers that contain an SSM.
    pub fn global_placement(&self) -> Vec<usize> {
        self.layer_kinds()
            .iter()
            .enumerate()
            .filter(|(_, k)| **k != LayerKind::Local)
            .map(|(i, _)| i)
            .collect()
    }

    /// A model with the same configuration except for global-layer placement.
    ///
    /// The stack is rebuilt from the configuration seed, so layers whose
    /// kind is unchanged get the same initial weights as before.
    pub fn configure_globals(&self, placement: Placement) -> Result<SpadeModel<T>> {
        let mut config = self.config.clone();
        config.placement = placement;
        config.validate()?;
        SpadeModel::new(config)
    }

    fn ssm_block(&self, layer: usize) -> Option<&SsmBlock<T>> {
        match self.layers.get(layer)? {
            Layer::Global { ssm, .. } | Layer::Ssm { ssm, .. } => Some(ssm),
            Layer::Local { .. } => None,
        }
    }

    /// Continuous SSM parameters of layer `layer`, if it has an SSM.
    pub fn ssm_params(&self, layer: usize) -> Option<ContinuousSsm<T>> {
        self.ssm_block(layer).map(|s| self.continuous(s))
    }

    fn continuous(&self, s: &SsmBlock<T>) -> ContinuousSsm<T> {
        let p = &self.params;
        ContinuousSsm {
            a: p.value(s.a).clone(),
            b: p.value(s.b).data().to_vec(),
            c: p.value(s.c).clone(),
            p: p.value(s.p).data().to_vec(),
            log_delta: p.value(s.log_delta).data().to_vec(),
            trainable: p.get(s.c).trainable || p.get(s.log_delta).trainable,
        }
    }

    fn ssm_version(&self, s: &SsmBlock<T>) -> u64 {
        [s.a, s.b, s.c, s.log_delta].iter().map(|&id| self.params.get(id).version).sum()
    }

    /// Logits for `tokens` without dropout or gradients.
    pub fn forward(&self, tokens: &[usize], mode: Mode) -> Result<Tensor<T>> {
        let mut s = Session::new(self, false, 0.0, 0);
        let out = s.logits(tokens, mode)?;
        Ok(s.tape.value(out).clone())
    }

    /// Mean loss over the supervised positions, without gradients.
    pub fn loss(&self, tokens: &[usize], targets: &Targets) -> Result<f64> {
        let mut s = Session::new(self, false, 0.0, 0);
        let loss = s.loss(tokens, targets)?;
        Ok(s.tape.value(loss).data()[0].as_f64())
    }

    /// Loss and gradients for every trainable parameter (by `ParamId`).
    ///
    /// `dropout_seed` fixes the dropout masks so results are reproducible.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &Targets,
        dropout: f64,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut s = Session::new(self, true, dropout, dropout_seed);
        let loss = s.loss(tokens, targets)?;
        let value = s.tape.value(loss).data()[0].as_f64();
        s.tape.backward(loss)?;
        let mut grads = vec![None; self.params.len()];
        for (i, binding) in s.bindings.iter().enumerate() {
            if let Some(v) = binding {
                grads[i] = s.tape.take_grad(*v);
            }
        }
        Ok((value, grads))
    }

    pub(crate) fn from_parts_checked(config: ModelConfig, values: Vec<(String, Tensor<T>, bool)>) -> Result<Self> {
        let mut model = SpadeModel::new(config)?;
        if values.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "shape table lists {} parameters, configuration implies {}",
                values.len(),
                model.params.len()
            )));
        }
        for (i, (name, value, trainable)) in values.into_iter().enumerate() {
            let id = ParamId(i);
            let p = model.params.get(id);
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: file has `{name}` {:?}, configuration expects `{}` {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            model.params.load(id, value, trainable)?;
        }
        Ok(model)
    }
}

/// Largest relative gap [`match_parameters`] accepts.
pub const PARAM_MATCH_TOLERANCE: f64 = 0.05;

/// `config` with its FFN width chosen so the total parameter count is as
/// close as possible to `target`. Used to give baselines the same budget
/// as a hybrid model; fails if no width lands within
/// [`PARAM_MATCH_TOLERANCE`].
pub fn match_parameters(config: &ModelConfig, target: usize) -> Result<ModelConfig> {
    let count = |c: &ModelConfig| SpadeModel::<f32>::new(c.clone()).map(|m| m.params().total_count());
    let base = count(config)?;
    // each unit of hidden width adds 2d + 1 scalars per layer
    let per_unit = (config.depth * (2 * config.d + 1)) as f64;
    let width = config.ffn_width() as f64 + (target as f64 - base as f64) / per_unit;
    let mut out = config.clone();
    out.ffn_hidden = width.round().max(1.0) as usize;
    let got = count(&out)?;
    let gap = (got as f64 - target as f64).abs() / target as f64;
    if gap > PARAM_MATCH_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "cannot match {target} parameters by FFN width: closest is {got}"
        )));
    }
    Ok(out)
}

/// One forward (and optionally backward) pass of a model on a fresh tape.
pub struct Session<'m, T: Real> {
    model: &'m SpadeModel<T>,
    pub tape: Tape<T>,
    bindings: Vec<Option<Var>>,
    grads: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m SpadeModel<T>, grads: bool, dropout: f64, seed: u64) -> Self {
        Session {
            model,
            tape: Tape::new(),
            bindings: vec![None; model.params.len()],
            grads,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The tape variable bound to parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let p = self.model.params.get(id);
        let v = self.tape.leaf(p.value.clone(), self.grads && p.trainable);
        self.bindings[id.0] = Some(v);
        v
    }

    fn norm(&mut self, n: Norm, x: Var) -> Result<Var> {
        let (g, b) = (self.param(n.gain), self.param(n.bias));
        self.tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        self.tape.dropout(x, self.dropout, &mut self.rng)
    }

    fn attn(&mut self, a: Attn, xn: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let (heads, pattern) = (cfg.heads, cfg.pattern);
        let (wq, wk, wv, wo) = (self.param(a.wq), self.param(a.wk), self.param(a.wv), self.param(a.wo));
        let q = self.tape.matmul(xn, wq)?;
        let k = self.tape.matmul(xn, wk)?;
        let v = self.tape.matmul(xn, wv)?;
        let h = attention::record_attend(&mut self.tape, q, k, v, heads, &pattern, default_layout(&pattern))?;
        let o = self.tape.matmul(h, wo)?;
        self.drop(o)
    }

    fn ffn(&mut self, f: Ffn, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.param(f.w1), self.param(f.b1), self.param(f.w2), self.param(f.b2));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_row(h, b1)?;
        let h = self.tape.gelu(h);
        let h = self.drop(h)?;
        let o = self.tape.matmul(h, w2)?;
        self.tape.add_row(o, b2)
    }

    fn ssm(&mut self, s: &SsmBlock<T>, x: Var) -> Result<Var> {
        let model = self.model;
        let len = self.tape.value(x).rows();
        let p = &model.params;
        let learn = self.grads && (p.get(s.c).trainable || p.get(s.log_delta).trainable);
        if learn {
            let (c, ld) = (self.param(s.c), self.param(s.log_delta));
            let kernel = ssm::record_kernel(&mut self.tape, p.value(s.a), p.value(s.b).data(), c, ld, len)?;
            let spectra = Arc::new(KernelSpectra::new(self.tape.value(kernel))?);
            return ssm::record_causal_conv(&mut self.tape, x, kernel, spectra);
        }
        let cached = s.cache.get_or_compute(model.ssm_version(s), len, &model.continuous(s))?;
        let kernel = self.tape.constant(cached.kernel.clone());
        ssm::record_causal_conv(&mut self.tape, x, kernel, Arc::clone(&cached.spectra))
    }

    fn layer(&mut self, layer: &Layer<T>, x: Var) -> Result<Var> {
        match layer {
            Layer::Global {
                ln_in,
                ln_local,
                ln_global,
                ln_ffn,
                attn,
                ssm,
                combine,
                ffn,
            } => {
                let n = self.norm(*ln_in, x)?;
                let local = self.attn(*attn, n)?;
                let global = self.ssm(ssm, n)?;
                let local = self.norm(*ln_local, local)?;
                let global = self.norm(*ln_global, global)?;
                let cat = self.tape.concat_cols(local, global)?;
                let w = self.param(*combine);
                let mixed = self.tape.matmul(cat, w)?;
                let xa = self.tape.add(mixed, x)?;
                self.ffn_residual(*ln_ffn, *ffn, xa)
            }
            Layer::Local {
                ln_in,
                ln_ffn,
                attn,
                ffn,
            } => {
                let n = self.norm(*ln_in, x)?;
                let a = self.attn(*attn, n)?;
                let xa = self.tape.add(a, x)?;
                self.ffn_residual(*ln_ffn, *ffn, xa)
            }
            Layer::Ssm {
                ln_in,
                ln_ffn,
                ssm,
                out,
                ffn,
            } => {
                let n = self.norm(*ln_in, x)?;
                let y = self.ssm(ssm, n)?;
                let y = self.tape.gelu(y);
                let w = self.param(*out);
                let y = self.tape.matmul(y, w)?;
                let y = self.drop(y)?;
                let xa = self.tape.add(y, x)?;
                self.ffn_residual(*ln_ffn, *ffn, xa)
            }
        }
    }

    fn ffn_residual(&mut self, ln: Norm, ffn: Ffn, xa: Var) -> Result<Var> {
        let n = self.norm(ln, xa)?;
        let f = self.ffn(ffn, n)?;
        self.tape.add(f, xa)
    }

    /// Final-normalized hidden states, L × d.
    pub fn hidden(&mut self, tokens: &[usize]) -> Result<Var> {
        let model = self.model;
        let e = self.param(model.embed);
        let mut x = self.tape.embedding(e, tokens)?;
        for layer in &model.layers {
            x = self.layer(layer, x)?;
        }
        self.norm(model.ln_final, x)
    }

    pub fn logits(&mut self, tokens: &[usize], mode: Mode) -> Result<Var> {
        let model = self.model;
        if mode == Mode::Lm && !model.config.pattern.causal && model.config.architecture == Architecture::Hybrid {
            return Err(Error::InvalidArgument("language modelling needs a causal attention pattern".into()));
        }
        let h = self.hidden(tokens)?;
        match mode {
            Mode::Lm => match model.lm_head {
                Some(w) => {
                    let w = self.param(w);
                    self.tape.matmul(h, w)
                }
                None => {
                    let e = self.param(model.embed);
                    self.tape.matmul_bt(h, e)
                }
            },
            Mode::Classify => {
                let (w, b) = model
                    .classifier
                    .ok_or_else(|| Error::InvalidArgument("model has no classifier head".into()))?;
                let pooled = self.tape.mean_rows(h)?;
                let (w, b) = (self.param(w), self.param(b));
                let o = self.tape.matmul(pooled, w)?;
                self.tape.add_row(o, b)
            }
        }
    }

    pub fn loss(&mut self, tokens: &[usize], targets: &Targets) -> Result<Var> {
        match targets {
            Targets::Tokens(t) => {
                if t.len() != tokens.len() {
                    return Err(Error::shape("lm targets", &[tokens.len()], &[t.len()]));
                }
                let logits = self.logits(tokens, Mode::Lm)?;
                self.tape.cross_entropy(logits, t)
            }
            Targets::Class(c) => {
                let logits = self.logits(tokens, Mode::Classify)?;
                self.tape.cross_entropy(logits, &[Some(*c)])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LocalityPattern;

    fn tiny(placement: Placement) -> ModelConfig {
        ModelConfig {
            vocab: 11,
            d: 8,
            depth: 3,
            heads: 2,
            pattern: LocalityPattern::window(2, true),
            placement,
            d_state: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lm_logits_have_vocab_columns() {
        let m = SpadeModel::<f64>::new(tiny(Placement::Bottom(1))).unwrap();
        let y = m.forward(&[1, 2, 3, 4, 5], Mode::Lm).unwrap();
        assert_eq!(y.shape(), &[5, 11]);
        assert!(y.all_finite());
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = SpadeModel::<f32>::new(tiny(Placement::Bottom(1))).unwrap();
        assert!(matches!(m.forward(&[1, 11], Mode::Lm), Err(Error::OutOfVocab { token: 11, .. })));
    }

    #[test]
    fn same_config_same_weights() {
        let a = SpadeModel::<f32>::new(tiny(Placement::All)).unwrap();
        let b = SpadeModel::<f32>::new(tiny(Placement::All)).unwrap();
        for ((_, p), (_, q)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn ssm_parameters_are_frozen_by_default() {
        let m = SpadeModel::<f32>::new(tiny(Placement::Bottom(1))).unwrap();
        for (_, p) in m.params().iter() {
            assert_eq!(p.trainable, !p.name.contains(".ssm."), "{}", p.name);
        }
    }

    #[test]
    fn configure_globals_moves_layers() {
        let m = SpadeModel::<f32>::new(tiny(Placement::Bottom(1))).unwrap();
        assert_eq!(m.global_placement(), vec![0]);
        assert_eq!(m.configure_globals(Placement::All).unwrap().global_placement(), vec![0, 1, 2]);
        assert_eq!(m.configure_globals(Placement::Top1).unwrap().global_placement(), vec![2]);
        assert!(m.configure_globals(Placement::Bottom(4)).is_err());
    }

    #[test]
    fn classifier_outputs_one_row() {
        let cfg = ModelConfig {
            classes: 3,
            pattern: LocalityPattern::chunk(4, false),
            ..tiny(Placement::Bottom(1))
        };
        let m = SpadeModel::<f64>::new(cfg).unwrap();
        let y = m.forward(&[1, 2, 3, 4, 5, 6], Mode::Classify).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert!(m.forward(&[1, 2], Mode::Lm).is_err(), "non-causal model cannot do LM");
    }

    #[test]
    fn grads_cover_trainable_params_only() {
        let m = SpadeModel::<f64>::new(tiny(Placement::Bottom(1))).unwrap();
        let tokens = [1, 5, 2, 7];
        let t = Targets::Tokens(vec![Some(5), Some(2), Some(7), None]);
        let (loss, grads) = m.loss_and_grads(&tokens, &t, 0.0, 0).unwrap();
        assert!(loss.is_finite());
        for (id, p) in m.params().iter() {
            assert_eq!(grads[id.index()].is_some(), p.trainable, "{}", p.name);
        }
        assert!((m.loss(&tokens, &t).unwrap() - loss).abs() < 1e-12);
    }
}
