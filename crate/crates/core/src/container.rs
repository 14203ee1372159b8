//! Versioned binary container for named f32 tensors plus a JSON meta block.
//!
//! Both checkpoint files and style-extractor weight files use this format:
//!
//! ```text
//! magic   8 bytes  "CRACKBIN"
//! u32 LE  format version (this build reads exactly FORMAT_VERSION)
//! u64 LE  meta length, then that many bytes of UTF-8 JSON
//! u64 LE  tensor count
//! per tensor:
//!   u32 LE name length, name bytes
//!   u8     rank, then rank u64 LE dims
//!   u64 LE payload byte length, then f32 LE data
//! ```
//!
//! A version mismatch fails loudly instead of guessing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result, Stage};

pub const MAGIC: &[u8; 8] = b"CRACKBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn to_tensor(&self, device: &Device, stage: Stage) -> Result<Tensor> {
        Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)
            .map_err(Error::tensor(stage))
    }

    pub fn from_tensor(tensor: &Tensor, stage: Stage) -> Result<Self> {
        let data = tensor
            .to_dtype(DType::F32)
            .and_then(|t| t.flatten_all()?.to_vec1::<f32>())
            .map_err(Error::tensor(stage))?;
        Ok(TensorEntry { shape: tensor.dims().to_vec(), data })
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.tensors.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str, stage: Stage) -> Result<&TensorEntry> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::state(stage, format!("container is missing tensor '{name}'")))
    }

    pub fn write(&self, path: &Path, stage: Stage) -> Result<()> {
        let io_err = |e| Error::Io { stage, path: path.to_path_buf(), source: e };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::state(stage, format!("meta serialization failed: {e}")))?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, entry) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(entry.shape.len() as u8);
            for &dim in &entry.shape {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            buf.extend_from_slice(&((entry.data.len() * 4) as u64).to_le_bytes());
            for &v in &entry.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)
    }

    pub fn read(path: &Path, stage: Stage) -> Result<Self> {
        let io_err = |e| Error::Io { stage, path: path.to_path_buf(), source: e };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Io { stage, path: path.to_path_buf(), source: e })?;
        let corrupt =
            |msg: &str| Error::state(stage, format!("{}: corrupt container: {msg}", path.display()));

        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Option<&'a [u8]> {
                let slice = self.bytes.get(self.pos..self.pos + n)?;
                self.pos += n;
                Some(slice)
            }
            fn u32(&mut self) -> Option<u32> {
                self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            }
            fn u64(&mut self) -> Option<u64> {
                self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            }
        }
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let trunc = || corrupt("truncated file");

        if cur.take(8).ok_or_else(trunc)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32().ok_or_else(trunc)?;
        if version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                stage,
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = cur.u64().ok_or_else(trunc)? as usize;
        let meta: serde_json::Value =
            serde_json::from_slice(cur.take(meta_len).ok_or_else(trunc)?)
                .map_err(|e| corrupt(&format!("meta is not valid JSON: {e}")))?;
        let count = cur.u64().ok_or_else(trunc)? as usize;

        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(trunc)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = cur.take(1).ok_or_else(trunc)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64().ok_or_else(trunc)? as usize);
            }
            let byte_len = cur.u64().ok_or_else(trunc)? as usize;
            if !byte_len.is_multiple_of(4) || byte_len / 4 != shape.iter().product::<usize>() {
                return Err(corrupt(&format!("tensor '{name}' payload does not match its shape")));
            }
            let raw = cur.take(byte_len).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, TensorEntry { shape, data });
        }
        Ok(Container { meta, tensors })
    }
}
