//! Binary tensor container used for checkpoints, feature files and AU tracks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"AVTC"            magic
//! u32                format version (1)
//! u64                manifest length in bytes
//! [u8; len]          UTF-8 JSON manifest
//! payloads           raw little-endian floats, one tensor after another in
//!                    manifest order
//! ```
//!
//! The manifest is `{"tensors": [{"name", "shape", "dtype"}...], "meta": {...}}`
//! where `dtype` is `"f64"` or `"f32"`. Writers always emit `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AVTC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt("not a tensor container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| fmt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut pos = 16 + mlen;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
            };
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| Error::Format(format!("truncated payload for '{}'", e.name)))?;
            let data: Vec<f64> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            };
            pos += n * width;
            let t = Tensor::new(e.shape, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((e.name, t));
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        Ok(Container {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
