//! Raw tensor files and checkpoint directories.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! b"AIARTNSR"   8-byte magic
//! u8            dtype code (0 = f32, 1 = f64)
//! u8            rank
//! u32 * rank    extents
//! payload       row-major elements
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"AIARTNSR";
pub const TENSOR_EXT: &str = "tns";

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decodes a tensor. The stored dtype must match `T`.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err("missing AIARTNSR magic".into());
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| format!("unknown dtype code {}", bytes[8]))?;
    if dtype != T::DTYPE {
        return Err(format!("stored dtype {dtype:?}, expected {:?}", T::DTYPE));
    }
    let rank = bytes[9] as usize;
    let header = 10 + 4 * rank;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let width = dtype.size();
    let expected = header + numel(&shape) * width;
    if bytes.len() != expected {
        return Err(format!(
            "payload length {} does not match shape {shape:?} ({} bytes expected)",
            bytes.len() - header,
            expected - header
        ));
    }
    let data = bytes[header..].chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|reason| Error::parse(path, reason))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Path of a named tensor under `root`; `/` in names becomes a directory.
pub fn tensor_path(root: &Path, name: &str) -> PathBuf {
    root.join(format!("{name}.{TENSOR_EXT}"))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub params: Vec<String>,
    /// Free-form configuration echo written by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// A parameter store plus optimizer state, written as a directory:
/// `checkpoint.json`, `params/<name>.tns`, `adam/{m,v}/<name>.tns`.
pub struct Checkpoint<T: Real = f32> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.params.iter() {
            write_tensor(&tensor_path(&dir.join("params"), name), &t.detached())?;
        }
        if let Some(adam) = &self.adam {
            for (i, (name, t)) in self.params.iter().enumerate() {
                let m = Tensor::new(t.shape().to_vec(), adam.m[i].clone())?;
                let v = Tensor::new(t.shape().to_vec(), adam.v[i].clone())?;
                write_tensor(&tensor_path(&dir.join("adam/m"), name), &m)?;
                write_tensor(&tensor_path(&dir.join("adam/v"), name), &v)?;
            }
        }
        let mut meta = self.meta.clone();
        meta.params = self.params.iter().map(|(n, _)| n.to_string()).collect();
        if let Some(adam) = &self.adam {
            meta.step = adam.step;
            meta.learning_rate = adam.lr;
        }
        write_json(&dir.join("checkpoint.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = read_json(&dir.join("checkpoint.json"))?;
        let mut params = ParamStore::new();
        for name in &meta.params {
            params.add(name.clone(), read_tensor(&tensor_path(&dir.join("params"), name))?)?;
        }
        let adam = if dir.join("adam").is_dir() {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in &meta.params {
                m.push(read_tensor::<T>(&tensor_path(&dir.join("adam/m"), name))?.into_data());
                v.push(read_tensor::<T>(&tensor_path(&dir.join("adam/v"), name))?.into_data());
            }
            Some(Adam {
                lr: meta.learning_rate,
                step: meta.step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Checkpoint { meta, params, adam })
    }
}
