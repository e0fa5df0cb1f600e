//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SRIMTNSR"
//! version    u32       1
//! header_len u64
//! header     JSON      {"kind", "meta", "tensors": [{"name", "dtype", "shape", "offset", "len"}]}
//! payload    bytes     tensor data, little-endian, at the recorded byte offsets
//! ```
//!
//! Generator checkpoints and feature network weights share this format and
//! are told apart by `kind`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SRIMTNSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    tensors: BTreeMap<String, Entry>,
}

fn decode<T: Scalar>(dtype: &str, bytes: &[u8]) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, shape: &[usize], values: &[T]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
        for &v in values {
            v.write_le(&mut bytes);
        }
        self.tensors.insert(
            name.into(),
            Entry {
                dtype: T::DTYPE.to_string(),
                shape: shape.to_vec(),
                bytes,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Shape and values of `name`, converted to `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok((e.shape.clone(), decode(&e.dtype, &e.bytes)?))
    }

    /// Values of `name`, which must have exactly `len` elements.
    pub fn get_exact<T: Scalar>(&self, name: &str, len: usize) -> Result<Vec<T>> {
        let (_, v) = self.get(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, e)| {
                let h = TensorHeader {
                    name: name.clone(),
                    dtype: e.dtype.clone(),
                    shape: e.shape.clone(),
                    offset,
                    len: e.bytes.len(),
                };
                offset += e.bytes.len();
                h
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.tensors.values() {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for t in header.tensors {
            let end = t.offset.checked_add(t.len).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated", t.name)))?;
            let width = match t.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
            };
            if t.shape.iter().product::<usize>() * width != t.len {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent size", t.name)));
            }
            tensors.insert(
                t.name,
                Entry {
                    dtype: t.dtype,
                    shape: t.shape,
                    bytes: payload[t.offset..end].to_vec(),
                },
            );
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
