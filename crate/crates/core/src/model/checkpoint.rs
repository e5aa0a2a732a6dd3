//! Binary checkpoint format.
//!
//! ```text
//! magic      "SPADE\0"
//! version    u16
//! metadata   u32 byte length, then UTF-8 `key=value` lines
//! shapes     u32 count, then per parameter:
//!              u32 name length, name, u8 trainable, u8 rank, rank × u32 dims
//! data       f32 values of every parameter, in shape-table order
//! ```
//!
//! All integers and floats are little-endian. Nothing may follow the data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{LocalityPattern, PatternKind};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::{Architecture, ModelConfig, Placement, SpadeModel};

const MAGIC: &[u8; 6] = b"SPADE\0";
pub const CHECKPOINT_VERSION: u16 = 1;

fn metadata(cfg: &ModelConfig) -> String {
    let p = &cfg.pattern;
    let fields: [(&str, String); 17] = [
        ("vocab", cfg.vocab.to_string()),
        ("d", cfg.d.to_string()),
        ("depth", cfg.depth.to_string()),
        ("heads", cfg.heads.to_string()),
        ("pattern", p.kind.as_str().to_string()),
        ("window", p.window.to_string()),
        ("chunk", p.chunk.to_string()),
        ("causal", p.causal.to_string()),
        ("placement", cfg.placement.to_string()),
        ("architecture", cfg.architecture.to_string()),
        ("d_state", cfg.d_state.to_string()),
        ("ffn_mult", cfg.ffn_mult.to_string()),
        ("ffn_hidden", cfg.ffn_hidden.to_string()),
        ("ssm_trainable", cfg.ssm_trainable.to_string()),
        ("tie_embeddings", cfg.tie_embeddings.to_string()),
        ("classes", cfg.classes.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_metadata(text: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line `{line}`")))?;
        map.insert(k, v);
    }
    fn get<F: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<F> {
        let raw = map
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has bad value `{raw}`")))
    }
    let kind: PatternKind = get(&map, "pattern")?;
    let pattern = LocalityPattern {
        kind,
        window: get(&map, "window")?,
        chunk: get(&map, "chunk")?,
        causal: get(&map, "causal")?,
    };
    let cfg = ModelConfig {
        vocab: get(&map, "vocab")?,
        d: get(&map, "d")?,
        depth: get(&map, "depth")?,
        heads: get(&map, "heads")?,
        pattern,
        placement: get::<Placement>(&map, "placement")?,
        architecture: get::<Architecture>(&map, "architecture")?,
        d_state: get(&map, "d_state")?,
        ffn_mult: get(&map, "ffn_mult")?,
        ffn_hidden: get(&map, "ffn_hidden")?,
        ssm_trainable: get(&map, "ssm_trainable")?,
        tie_embeddings: get(&map, "tie_embeddings")?,
        classes: get(&map, "classes")?,
        seed: get(&map, "seed")?,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("metadata describes an invalid model: {e}")))?;
    Ok(cfg)
}

pub fn write_checkpoint<T: Real, W: Write>(model: &SpadeModel<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta = metadata(&model.config);
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(meta.as_bytes())?;
    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (_, p) in model.params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&[p.trainable as u8, p.value.shape().len() as u8])?;
        for &dim in p.value.shape() {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
    }
    for (_, p) in model.params.iter() {
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads a model; nothing is returned unless the whole file is valid.
pub fn read_checkpoint<T: Real, R: Read>(input: R) -> Result<SpadeModel<T>> {
    let mut r = Cursor { inner: input };
    if r.bytes(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")?;
    let meta = String::from_utf8(r.bytes(meta_len, "metadata")?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let config = parse_metadata(&meta)?;

    let count = r.u32("parameter count")?;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("parameter name length")?;
        let name = String::from_utf8(r.bytes(name_len, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad trainable flag {other} for `{name}`"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Checkpoint(format!("parameter `{name}` has empty shape {shape:?}")));
        }
        table.push((name, trainable, shape));
    }
    let mut values = Vec::with_capacity(table.len());
    for (name, trainable, shape) in table {
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        values.push((name, Tensor::new(&shape, data)?, trainable));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    SpadeModel::from_parts_checked(config, values)
}

pub fn save_checkpoint<T: Real>(model: &SpadeModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<SpadeModel<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SpadeModel<f32> {
        SpadeModel::new(ModelConfig {
            vocab: 7,
            d: 4,
            depth: 2,
            heads: 2,
            d_state: 3,
            pattern: LocalityPattern::chunk(3, true),
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn bytes(m: &SpadeModel<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let b = bytes(&model());
        assert_eq!(&b[..6], b"SPADE\0");
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 1);
        let meta_len = u32::from_le_bytes([b[8], b[9], b[10], b[11]]) as usize;
        let meta = std::str::from_utf8(&b[12..12 + meta_len]).unwrap();
        assert!(meta.contains("depth=2\n") && meta.contains("placement=bottom_1\n"));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = bytes(&model());
        let back: SpadeModel<f32> = read_checkpoint(&b[..]).unwrap();
        assert_eq!(bytes(&back), b);
        assert_eq!(back.config(), model().config());
    }

    #[test]
    fn corruption_is_detected() {
        let b = bytes(&model());
        let mut bad = b.clone();
        bad[6] = 9;
        assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::Checkpoint(m)) if m.contains("version")));
        bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::Checkpoint(m)) if m.contains("magic")));
        assert!(matches!(read_checkpoint::<f32, _>(&b[..b.len() - 1]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(read_checkpoint::<f32, _>(&long[..]), Err(Error::Checkpoint(m)) if m.contains("trailing")));
    }
}
