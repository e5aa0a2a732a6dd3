use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spade::attention::{record_attend, Layout, LocalityPattern};
use spade::model::{Architecture, ModelConfig, Placement, SpadeModel, Targets};
use spade::ssm::{hippo_init, record_causal_conv, record_kernel};
use spade::tensor::fft::KernelSpectra;
use spade::tensor::gradcheck::check_gradients;
use spade::{Tape, Tensor, Var};

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> spade::Result<Var>,
{
    let r = check_gradients(inputs, 1e-6, f).unwrap();
    assert!(r.checked > 0);
    assert!(r.passes(OP_TOL), "{name}: rel err {:e} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn elementwise_and_linear_ops() {
    let (a, b) = (rand(&[4, 3], 1), rand(&[4, 3], 2));
    check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)));
    check("gelu", std::slice::from_ref(&a), |t, v| Ok(t.gelu(v[0])));
    // keep relu away from its kink
    let shifted = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check("relu", &[shifted], |t, v| Ok(t.relu(v[0])));
    check("add_row", &[a.clone(), rand(&[3], 3)], |t, v| t.add_row(v[0], v[1]));
    check("concat_cols", &[a.clone(), rand(&[4, 5], 4)], |t, v| t.concat_cols(v[0], v[1]));
    check("sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])));
    check("mean_rows", std::slice::from_ref(&a), |t, v| t.mean_rows(v[0]));
    check("matmul", &[a.clone(), rand(&[3, 5], 5)], |t, v| t.matmul(v[0], v[1]));
    check("matmul_bt", &[a.clone(), rand(&[6, 3], 6)], |t, v| t.matmul_bt(v[0], v[1]));
}

#[test]
fn normalization_softmax_and_losses() {
    let x = rand(&[5, 6], 7);
    check("softmax", std::slice::from_ref(&x), |t, v| t.softmax_rows(v[0], None));
    let mask = LocalityPattern::window(1, true).additive_mask::<f64>(5);
    let sq = rand(&[5, 5], 8);
    check("masked softmax", &[sq], |t, v| t.softmax_rows(v[0], Some(&mask)));
    check("layer_norm", &[x.clone(), rand(&[6], 9), rand(&[6], 10)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let targets = vec![Some(1), None, Some(5), Some(0), Some(2)];
    check("cross_entropy", std::slice::from_ref(&x), |t, v| t.cross_entropy(v[0], &targets));
    check("embedding", &[rand(&[7, 3], 11)], |t, v| t.embedding(v[0], &[3, 0, 3, 6]));
    check("dropout", &[x], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        t.dropout(v[0], 0.3, &mut rng)
    });
}

#[test]
fn attention_op_all_patterns_and_layouts() {
    let (l, d) = (9, 4);
    let inputs = [rand(&[l, d], 12), rand(&[l, d], 13), rand(&[l, d], 14)];
    for pattern in [
        LocalityPattern::full(true),
        LocalityPattern::full(false),
        LocalityPattern::window(2, true),
        LocalityPattern::window(2, false),
        LocalityPattern::chunk(4, true),
        LocalityPattern::chunk(3, false),
    ] {
        for layout in [Layout::Dense, Layout::Banded] {
            check(&format!("attend {pattern:?} {layout:?}"), &inputs, |t, v| {
                record_attend(t, v[0], v[1], v[2], 2, &pattern, layout)
            });
        }
    }
}

#[test]
fn causal_convolution_op() {
    let (l, ch) = (11, 3);
    check("causal_conv", &[rand(&[l, ch], 15), rand(&[ch, l], 16)], |t, v| {
        let spectra = Arc::new(KernelSpectra::new(t.value(v[1]))?);
        record_causal_conv(t, v[0], v[1], spectra)
    });
}

#[test]
fn kernel_op_wrt_readout_and_step() {
    let ssm = hippo_init::<f64>(5, 2, 3).unwrap();
    let (a, b) = (ssm.a.clone(), ssm.b.clone());
    let log_delta = Tensor::new(&[2], ssm.log_delta.clone()).unwrap();
    check("kernel", &[ssm.c.clone(), log_delta], |t, v| record_kernel(t, &a, &b, v[0], v[1], 10));
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab: 11,
        d: 8,
        depth: 2,
        heads: 2,
        pattern: LocalityPattern::window(3, true),
        placement: Placement::Bottom(1),
        d_state: 4,
        seed,
        ..ModelConfig::default()
    }
}

/// Central differences over every trainable scalar of the model.
fn model_rel_err(cfg: ModelConfig, tokens: &[usize], targets: &Targets, dropout: f64) -> f64 {
    let mut model = SpadeModel::<f64>::new(cfg).unwrap();
    let (_, grads) = model.loss_and_grads(tokens, targets, dropout, 5).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for j in 0..model.params().get(id).value.len() {
            let orig = model.params().get(id).value.data()[j];
            let mut eval = |x: f64| {
                model.params_mut().value_mut(id).data_mut()[j] = x;
                model.loss_and_grads(tokens, targets, dropout, 5).unwrap().0
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            model.params_mut().value_mut(id).data_mut()[j] = orig;
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

fn lm_batch() -> (Vec<usize>, Targets) {
    let tokens = vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5, 6, 2];
    let mut targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
    targets.push(None);
    (tokens, Targets::Tokens(targets))
}

#[test]
fn two_layer_model_end_to_end() {
    let (tokens, targets) = lm_batch();
    let e = model_rel_err(tiny(1), &tokens, &targets, 0.0);
    assert!(e <= MODEL_TOL, "window model: {e:e}");
}

#[test]
fn model_variants_end_to_end() {
    let (tokens, targets) = lm_batch();
    let variants = [
        ("chunk", ModelConfig { pattern: LocalityPattern::chunk(4, true), ..tiny(2) }),
        ("all global", ModelConfig { placement: Placement::All, ..tiny(3) }),
        ("trainable ssm", ModelConfig { ssm_trainable: true, ..tiny(4) }),
        ("ssm only", ModelConfig { architecture: Architecture::SsmOnly, ..tiny(5) }),
        ("untied", ModelConfig { tie_embeddings: false, ..tiny(6) }),
    ];
    for (name, cfg) in variants {
        let e = model_rel_err(cfg, &tokens, &targets, 0.0);
        assert!(e <= MODEL_TOL, "{name}: {e:e}");
    }
    let e = model_rel_err(tiny(7), &tokens, &targets, 0.2);
    assert!(e <= MODEL_TOL, "with dropout: {e:e}");
    let classify = ModelConfig {
        classes: 3,
        pattern: LocalityPattern::window(3, false),
        ..tiny(8)
    };
    let e = model_rel_err(classify, &tokens, &Targets::Class(2), 0.0);
    assert!(e <= MODEL_TOL, "classifier: {e:e}");
}
