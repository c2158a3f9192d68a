//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! GEODP-CKPT\n
//! <one line of JSON: format_version, meta, manifest [{name, shape, dtype, offset, nbytes}]>\n
//! <raw little-endian payload, entries back to back>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &str = "GEODP-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    manifest: Vec<ManifestEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = t.numel() * T::DTYPE.size_bytes();
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: T::DTYPE,
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            manifest: self.manifest(),
        };
        let json = serde_json::to_string(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..magic_end] != MAGIC.as_bytes() {
            return Err(bad("bad magic"));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header: Header = serde_json::from_slice(&rest[..header_end])
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &rest[header_end + 1..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        let mut expected_end = 0;
        for e in &header.manifest {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "`{}` stored as {:?}, requested {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let size = T::DTYPE.size_bytes();
            if e.nbytes != numel(&e.shape) * size || e.offset + e.nbytes > payload.len() {
                return Err(Error::Checkpoint(format!("`{}` truncated or malformed", e.name)));
            }
            let data = payload[e.offset..e.offset + e.nbytes]
                .chunks_exact(size)
                .map(T::read_le)
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected_end = expected_end.max(e.offset + e.nbytes);
        }
        if expected_end != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40),
            b in proptest::collection::vec(any::<f32>(), 6),
        ) {
            let mut ck = Checkpoint::<f32>::new(serde_json::json!({"epoch": 3}));
            ck.push("a", Tensor::new([a.len()], a.clone()).unwrap());
            ck.push("b", Tensor::new([2, 3], b.clone()).unwrap());
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for (x, y) in back.get("b").unwrap().data().iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut ck = Checkpoint::<f64>::new(serde_json::Value::Null);
        ck.push("x", Tensor::ones([2]));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let mut ck = Checkpoint::<f32>::new(serde_json::Value::Null);
        ck.push("x", Tensor::ones([4]));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nope\n{}\n").is_err());
    }
}
