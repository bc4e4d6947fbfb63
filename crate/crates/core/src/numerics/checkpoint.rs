//! Binary tensor container used for checkpoints and feature caches.
//!
//! Layout:
//!
//! ```text
//! magic    b"ARTC"
//! version  u32 LE
//! hlen     u64 LE      length of the JSON header in bytes
//! header   JSON        {"metadata": {...}, "entries": [{"name", "shape", "offset"}]}
//! payload  f64 LE      concatenated tensor data, offsets counted in values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ARTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    metadata: BTreeMap<String, serde_json::Value>,
    entries: Vec<Entry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value)
            .map_err(|e| Error::Checkpoint(format!("metadata {key}: {e}")))?;
        self.metadata.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("metadata {key}: {e}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a tensor container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn roundtrip_is_lossless(
            values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let t = Tensor::matrix(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let mut c = Container::new();
            c.set_meta("kind", "TPHN").unwrap();
            c.push("a.b", t.clone());
            c.push("scalar", Tensor::row_vector(vec![values[0]]));
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut c = Container::new();
        c.push("x", Tensor::row_vector(vec![1.0]));
        let mut bytes = c.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_detected() {
        let mut c = Container::new();
        c.push("x", Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
