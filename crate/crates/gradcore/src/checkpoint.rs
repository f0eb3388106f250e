//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GRADCKPT"
//! version    u32      FORMAT_VERSION
//! kind       u32 len + UTF-8 bytes
//! widths     u32 count + u64 each            (the LayerSpec)
//! params     u32 count, then per parameter:
//!            u32 len + UTF-8 name
//!            u32 rank + u64 per dimension
//!            f64 per value, row-major
//! ```
//!
//! Parameters are written in name order, so encoding is a pure function of the
//! checkpoint contents and `encode(decode(b)) == b` for every valid `b`.

use std::path::Path;

use crate::error::{GradError, Result};
use crate::mlp::LayerSpec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form model tag, e.g. `"vector_field"`.
    pub kind: String,
    pub layer_spec: LayerSpec,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: impl Into<String>, layer_spec: LayerSpec, store: &ParamStore) -> Self {
        Checkpoint {
            kind: kind.into(),
            layer_spec,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// A fresh store (zeroed moments, step 0) holding the saved values.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.params {
            store.insert(name.clone(), t.clone());
        }
        store
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_u32(&mut out, self.layer_spec.widths.len());
        for &w in &self.layer_spec.widths {
            out.extend_from_slice(&(w as u64).to_le_bytes());
        }
        let mut params: Vec<&(String, Tensor)> = self.params.iter().collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        put_u32(&mut out, params.len());
        for (name, t) in params {
            put_str(&mut out, name);
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

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(GradError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GradError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let kind = r.string()?;
        let n_widths = r.u32()? as usize;
        let widths = (0..n_widths).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let layer_spec = LayerSpec {
            widths: widths.into_iter().map(|w| w as usize).collect(),
        };
        layer_spec
            .validate()
            .map_err(|e| GradError::Checkpoint(format!("layer spec: {e}")))?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        let mut prev: Option<String> = None;
        for _ in 0..n_params {
            let name = r.string()?;
            if prev.as_ref().is_some_and(|p| p >= &name) {
                return Err(GradError::Checkpoint(format!(
                    "parameters not in strictly increasing name order at `{name}`"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| GradError::Checkpoint("shape overflows".into()))?;
            if numel > r.remaining() / 8 {
                return Err(GradError::Checkpoint(format!("truncated data for `{name}`")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| GradError::Checkpoint(format!("{name}: {e}")))?;
            prev = Some(name.clone());
            params.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(GradError::Checkpoint(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Checkpoint {
            kind,
            layer_spec,
            params,
        })
    }

    pub fn read(path: &Path) -> std::io::Result<std::result::Result<Self, GradError>> {
        Ok(Checkpoint::decode(&std::fs::read(path)?))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(GradError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| GradError::Checkpoint("invalid UTF-8 string".into()))
    }
}
