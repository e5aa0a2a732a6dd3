use spade::attention::LocalityPattern;
use spade::model::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Mode, ModelConfig, Placement, SpadeModel};
use spade::Error;

fn model(seed: u64) -> SpadeModel<f32> {
    SpadeModel::new(ModelConfig {
        vocab: 20,
        d: 16,
        depth: 3,
        heads: 4,
        pattern: LocalityPattern::chunk(6, true),
        placement: Placement::Bottom(2),
        d_state: 8,
        classes: 3,
        tie_embeddings: false,
        ssm_trainable: true,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn bytes(m: &SpadeModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(m, &mut out).unwrap();
    out
}

#[test]
fn round_trip_is_bit_exact_and_forward_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spade");
    let m = model(4);
    save_checkpoint(&m, &path).unwrap();
    let back: SpadeModel<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        let bits = |t: &spade::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let t: Vec<usize> = (0..30).map(|i| (i * 11) % 20).collect();
    for mode in [Mode::Lm, Mode::Classify] {
        let (x, y) = (m.forward(&t, mode).unwrap(), back.forward(&t, mode).unwrap());
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(bytes(&back), std::fs::read(&path).unwrap());
}

#[test]
fn f64_models_store_f32_values() {
    let m = SpadeModel::<f64>::new(ModelConfig {
        d: 8,
        heads: 2,
        d_state: 4,
        vocab: 10,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back: SpadeModel<f64> = read_checkpoint(&buf[..]).unwrap();
    for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}

#[test]
fn different_seeds_give_different_files() {
    assert_ne!(bytes(&model(1)), bytes(&model(2)));
    assert_eq!(bytes(&model(1)), bytes(&model(1)));
}

#[test]
fn damaged_files_are_rejected() {
    let good = bytes(&model(0));
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("empty", vec![]),
        ("bad magic", {
            let mut b = good.clone();
            b[0] = b'X';
            b
        }),
        ("bad version", {
            let mut b = good.clone();
            b[6] = 0xff;
            b
        }),
        ("truncated", good[..good.len() - 3].to_vec()),
        ("trailing", {
            let mut b = good.clone();
            b.push(0);
            b
        }),
    ];
    for (what, b) in cases {
        let r: spade::Result<SpadeModel<f32>> = read_checkpoint(&b[..]);
        assert!(matches!(r, Err(Error::Checkpoint(_)) | Err(Error::Io(_))), "{what}: {r:?}");
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let r: spade::Result<SpadeModel<f32>> = load_checkpoint("/nonexistent/dir/model.spade");
    assert_eq!(r.unwrap_err().exit_code(), 4);
}
