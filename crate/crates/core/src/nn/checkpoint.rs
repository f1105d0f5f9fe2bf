//! Binary checkpoint container.
//!
//! Layout: the 6-byte magic `COSEQ1`, then records until end of file. Each
//! record is `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims and
//! the `f32` payload, all little-endian.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"COSEQ1";

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f32) {
        self.push(name, Tensor::scalar(v));
    }

    pub fn extend(&mut self, records: Vec<(String, Tensor)>) {
        self.records.extend(records);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            reason: format!("missing record {name}"),
        })
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let t = self.require(name)?;
        if t.len() != 1 {
            return Err(Error::dim("checkpoint scalar", 1, t.len()));
        }
        Ok(t.data()[0])
    }

    /// Records whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.records
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "checkpoint",
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32().ok_or_else(|| bad("truncated name length"))? as usize;
            let name = r.take(len).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(&format!("record {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r
                .take(n.checked_mul(4).ok_or_else(|| bad("oversized record"))?)
                .ok_or_else(|| bad(&format!("truncated payload for {name}")))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
