//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRLD"  u32 version  u32 len  config text (UTF-8)
//! u32 count
//! count × { u32 len  name  u8 dtype  u32 ndim  ndim × u64 dim  values }
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! `dtype` 0 stores values as `f32`, 1 as `f64`. A tensor is written as
//! `f32` only when every value survives the round trip, so loading is always
//! bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRLD";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: ParamStore,
}

fn fits_f32(t: &Tensor) -> bool {
    t.data().iter().all(|&v| (v as f32) as f64 == v || v.is_nan())
}

impl Checkpoint {
    pub fn new(config_text: impl Into<String>, tensors: ParamStore) -> Self {
        Checkpoint {
            config_text: config_text.into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_bytes(&mut out, name.as_bytes());
            let single = fits_f32(t);
            out.push(if single { 0 } else { 1 });
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                if single {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    /// Parses a checkpoint. The digest is verified before anything else, so
    /// a truncated or altered file yields no partial result.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < DIGEST_LEN {
            return Err(DataError::Digest);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DataError::Digest);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DataError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| DataError::Malformed("config text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| DataError::Malformed("tensor name is not UTF-8".into()))?;
            if tensors.contains(&name) {
                return Err(DataError::Malformed(format!("duplicate tensor {name}")));
            }
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                1 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                other => return Err(DataError::Malformed(format!("unknown dtype {other} for {name}"))),
            };
            let t = Tensor::new(shape, data).map_err(|e| DataError::Malformed(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(DataError::Malformed("trailing bytes after tensor table".into()));
        }
        Ok(Checkpoint {
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String, DataError> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(hex_digest(&bytes[bytes.len() - DIGEST_LEN..]))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> ParamStore {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Fails on the first tensor not covered by any of `prefixes`.
    pub fn check_names(&self, prefixes: &[&str]) -> Result<(), DataError> {
        match self
            .tensors
            .names()
            .find(|n| !prefixes.iter().any(|p| n.starts_with(p)))
        {
            Some(n) => Err(DataError::UnknownTensor(n.to_string())),
            None => Ok(()),
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(Sha256::digest(bytes).as_slice())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DataError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], DataError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
