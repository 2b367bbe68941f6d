//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `magic[4] | version u32 | manifest_len u64 | manifest (UTF-8 JSON) |
//! n_values u64 | n_values x f64`.
//! `write` also drops a pretty-printed copy of the manifest next to the
//! file as `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, TensorSpec};

pub const FORMAT_VERSION: u32 = 1;

pub const MAGIC_TWIN: [u8; 4] = *b"CTWN";
pub const MAGIC_GUARDIAN: [u8; 4] = *b"CKDE";
pub const MAGIC_POLICY: [u8; 4] = *b"CPOL";
pub const MAGIC_ENSEMBLE: [u8; 4] = *b"CENS";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub manifest: Value,
    pub data: Vec<f64>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Container {
    pub fn new(magic: [u8; 4], manifest: &impl Serialize, data: Vec<f64>) -> Result<Self> {
        Ok(Self { magic, manifest: serde_json::to_value(manifest)?, data })
    }

    pub fn manifest_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(24 + manifest.len() + 8 * self.data.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected: [u8; 4]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != expected {
            return Err(format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected)
            )));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let mlen = cur.u64()? as usize;
        let manifest: Value = serde_json::from_slice(cur.take(mlen)?)?;
        let n = cur.u64()? as usize;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| format_err("value count overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if cur.pos != bytes.len() {
            return Err(format_err("trailing bytes after checkpoint data"));
        }
        Ok(Self { magic, manifest, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path, expected: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected)
    }
}

/// Packs a parameter store with model metadata. The manifest holds
/// `{"meta": meta, "tensors": [{name, shape}, ...]}`.
pub fn pack_store(magic: [u8; 4], meta: &impl Serialize, store: &ParamStore) -> Result<Container> {
    let manifest = serde_json::json!({ "meta": serde_json::to_value(meta)?, "tensors": store.specs() });
    Ok(Container { magic, manifest, data: store.to_flat() })
}

/// Metadata of a container produced by [`pack_store`].
pub fn unpack_meta<T: DeserializeOwned>(c: &Container) -> Result<T> {
    let meta = c.manifest.get("meta").ok_or_else(|| format_err("manifest has no meta section"))?;
    Ok(serde_json::from_value(meta.clone())?)
}

/// Loads values into `store` after checking the tensor manifest matches.
pub fn unpack_store(c: &Container, store: &mut ParamStore) -> Result<()> {
    let specs: Vec<TensorSpec> = serde_json::from_value(
        c.manifest.get("tensors").cloned().ok_or_else(|| format_err("manifest has no tensor list"))?,
    )?;
    if specs != store.specs() {
        return Err(format_err("tensor manifest does not match the model architecture"));
    }
    store.load_flat(&c.data)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
