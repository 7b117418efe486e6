//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PVITCKPT"  u32 version
//! u64 len, config as JSON
//! u32 entry count, then per entry:
//!   u32 len, name (UTF-8)
//!   u8 kind      0 = parameter, 1 = batch-norm running mean, 2 = running var
//!   u8 initialized (batch-norm entries only; 0 for parameters)
//!   u32 rank, rank × u64 extents, numel × f64 bits
//! ```
//!
//! Parameter names follow the model's dotted scheme, e.g.
//! `stages.1.2.attn.heads.0.q.weight`. Running statistics use the norm
//! layer's prefix with a `.running_mean` / `.running_var` suffix.

use std::io::{Read, Write};
use std::path::Path;

use super::config::PainViTConfig;
use super::painvit::PainViT;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PVITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_MEAN: u8 = 1;
const KIND_VAR: u8 = 2;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_entry(w: &mut impl Write, name: &str, kind: u8, init: bool, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[kind, init as u8])?;
    put_u32(w, shape.len() as u32)?;
    for &d in shape {
        put_u64(w, d as u64)?;
    }
    for v in data {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Serializes `model` into `w`.
pub fn write_checkpoint(model: &PainViT, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Data(e.to_string()))?;
    put_u64(w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    let store = model.store();
    put_u32(w, (store.params().len() + 2 * store.norms().len()) as u32)?;
    for p in store.params() {
        put_entry(w, &p.name, KIND_PARAM, false, p.tensor.shape(), p.tensor.data())?;
    }
    for n in store.norms() {
        let c = [n.mean.len()];
        put_entry(w, &format!("{}.running_mean", n.name), KIND_MEAN, n.initialized, &c, &n.mean)?;
        put_entry(w, &format!("{}.running_var", n.name), KIND_VAR, n.initialized, &c, &n.var)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint(r: impl Read) -> Result<PainViT> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Data("not a PainViT checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u64()? as usize;
    let config: PainViTConfig =
        serde_json::from_slice(&r.bytes(len)?).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let mut model = PainViT::new(config, 0)?;
    let n_params = model.store().params().len();
    let n_norms = model.store().norms().len();
    let mut seen_params = vec![false; n_params];
    let mut seen_norms = vec![[false; 2]; n_norms];

    let count = r.u32()?;
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?).map_err(|_| Error::Data("non-UTF-8 entry name".into()))?;
        let kind = r.u8()?;
        let init = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let store = model.store_mut();
        match kind {
            KIND_PARAM => {
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
                let t = store.get_mut(id);
                if t.shape() != shape.as_slice() {
                    return Err(Error::Data(format!(
                        "parameter {name}: stored shape {shape:?}, model expects {:?}",
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&data);
                seen_params[id.0] = true;
            }
            KIND_MEAN | KIND_VAR => {
                let suffix = if kind == KIND_MEAN { ".running_mean" } else { ".running_var" };
                let prefix = name
                    .strip_suffix(suffix)
                    .ok_or_else(|| Error::Data(format!("malformed statistics entry {name}")))?;
                let idx = store
                    .norms()
                    .iter()
                    .position(|n| n.name == prefix)
                    .ok_or_else(|| Error::Data(format!("unknown batch norm {prefix}")))?;
                let n = &mut store.norms_mut()[idx];
                if shape != [n.mean.len()] {
                    return Err(Error::Data(format!("statistics {name}: bad shape {shape:?}")));
                }
                if kind == KIND_MEAN {
                    n.mean = data;
                } else {
                    n.var = data;
                }
                n.initialized = init;
                seen_norms[idx][(kind - 1) as usize] = true;
            }
            other => return Err(Error::Data(format!("entry {name}: unknown kind {other}"))),
        }
    }
    if let Some(i) = seen_params.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "checkpoint is missing parameter {}",
            model.store().params()[i].name
        )));
    }
    if let Some(i) = seen_norms.iter().position(|s| !(s[0] && s[1])) {
        return Err(Error::Data(format!(
            "checkpoint is missing statistics for {}",
            model.store().norms()[i].name
        )));
    }
    Ok(model)
}

pub fn save(model: &PainViT, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    Ok(w.flush()?)
}

pub fn load(path: impl AsRef<Path>) -> Result<PainViT> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
