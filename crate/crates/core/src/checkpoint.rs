//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "crformer-ckpt-v1\n"
//! u32 config length, config as JSON
//! u32 parameter count
//! per parameter: u32 name length, name, u32 ndim, ndim × u64 dims, f64 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CrFormer, ModelConfig};

pub const MAGIC: &[u8] = b"crformer-ckpt-v1\n";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(model: &CrFormer) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    let params = model.params();
    put_u32(&mut out, params.len());
    for (_, name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads only the stored configuration.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(MAGIC.len()).ok() != Some(MAGIC) {
        return Err(Error::Version("not a crformer-ckpt-v1 file".into()));
    }
    let n = r.u32()? as usize;
    serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Version(format!("stored model config does not parse: {e}")))
}

/// Rebuilds a model, checking every stored tensor against the architecture
/// implied by the stored config.
pub fn from_bytes(bytes: &[u8]) -> Result<CrFormer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let cfg = read_header(&mut r)?;
    let mut model = CrFormer::new(cfg, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Version(format!(
            "checkpoint has {count} tensors, architecture expects {}",
            model.params().len()
        )));
    }
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if name != store.name(id) {
            return Err(Error::Version(format!(
                "expected parameter {}, found {name}",
                store.name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let t = store.get_mut(id);
        if dims != t.shape() {
            return Err(Error::Version(format!(
                "{name}: stored shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.numel() * 8)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &CrFormer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<CrFormer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Like [`load`], but the stored architecture must equal `expected`.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<CrFormer> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::Version(format!(
            "checkpoint config {:?} differs from requested {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
