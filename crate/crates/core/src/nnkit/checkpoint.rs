//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! describing every tensor (name and shape) plus free-form metadata and its
//! SHA-256 hash, then the raw little-endian `f64` payload in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HOICKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Named parameters plus JSON metadata (model config, statistics, etc.).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: serde_json::Value,
}

pub fn config_hash(metadata: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(metadata).expect("JSON values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.metadata)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config_hash: self.config_hash(),
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        bytes
            .read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (head, mut payload) = bytes.split_at(len);
        let header: Header = serde_json::from_slice(head)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.config_hash != config_hash(&header.metadata) {
            return Err(Error::Checkpoint("config hash does not match metadata".into()));
        }
        let mut params = ParamStore::new();
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            if payload.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated tensor {}", entry.name)));
            }
            let (chunk, rest) = payload.split_at(8 * n);
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(entry.name, Tensor::new(entry.rows, entry.cols, data));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(2, 2, vec![0.1, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300]));
        params.insert("b", Tensor::row_vector(vec![std::f64::consts::PI]));
        Checkpoint {
            params,
            metadata: serde_json::json!({"config": {"d": 8}}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_metadata_rejected() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replace("\"d\":8", "\"d\":9");
        let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("hash") || err.to_string().contains("header"));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
