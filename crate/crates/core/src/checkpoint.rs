//! Single-file tensor archive.
//!
//! ```text
//! b"FCKPT001" | u64 LE manifest length | JSON manifest | raw LE buffers
//! ```
//!
//! The manifest lists each tensor's name, shape, dtype and byte offset into
//! the buffer section, plus a free-form `meta` object (model configuration,
//! training state).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::{ModelConfig, NetError, VelocityNet};
use crate::tape::Tensor;

const MAGIC: &[u8; 8] = b"FCKPT001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("bad metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// All tensors whose names start with `prefix`, in stored order, prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(&str, &Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
            .collect()
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype,
                offset,
            });
            offset += t.len() * dtype.size();
        }
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for &v in &t.data {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
        let data = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let size = e.dtype.size();
            let end = e.offset + n * size;
            if end > data.len() {
                return Err(corrupt(&format!("tensor {} runs past end of file", e.name)));
            }
            let raw = &data[e.offset..end];
            let values = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            tensors.push((e.name, Tensor::new(e.shape, values)));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        // Write then rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes(dtype)).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const PARAM_PREFIX: &str = "params/";

/// Adds the network's configuration and parameters to an archive.
pub fn store_model(archive: &mut Archive, net: &VelocityNet, prefix: &str) -> Result<(), CheckpointError> {
    if let serde_json::Value::Object(m) = &mut archive.meta {
        m.insert("model".into(), serde_json::to_value(&net.config)?);
    }
    for (spec, t) in net.specs.iter().zip(&net.params) {
        archive.push(format!("{prefix}{}", spec.name), t.clone());
    }
    Ok(())
}

/// Rebuilds a network from an archive written by `store_model`.
pub fn load_model(archive: &Archive, prefix: &str) -> Result<VelocityNet, CheckpointError> {
    let config: ModelConfig = serde_json::from_value(
        archive
            .meta
            .get("model")
            .cloned()
            .ok_or_else(|| CheckpointError::Corrupt("no model configuration".into()))?,
    )?;
    let (specs, _) = crate::net::param_specs(&config);
    let params = specs
        .iter()
        .map(|s| archive.get(&format!("{prefix}{}", s.name)).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VelocityNet::from_params(config, params)?)
}

pub fn save_model(path: &Path, net: &VelocityNet, dtype: DType) -> Result<(), CheckpointError> {
    let mut a = Archive::new(serde_json::json!({}));
    store_model(&mut a, net, PARAM_PREFIX)?;
    a.write(path, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Modulation, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_lat: 4,
            n_lon: 8,
            n_surface: 1,
            n_pressure_vars: 1,
            n_levels: 2,
            cond_channels: 1,
            embed_dim: 4,
            depths: [1, 1, 1],
            n_heads: 1,
            pressure_patch: [2, 2, 2],
            surface_patch: [2, 2],
            window: [1, 2, 2],
            merge: [1, 2, 2],
            time_embed_dim: 4,
            lowrank_r: 1,
            modulation: Modulation::LowRank,
            mlp_ratio: 2,
            time_scale: 1000.0,
            seed: 9,
        }
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = VelocityNet::new(cfg()).unwrap();
        save_model(&path, &net, DType::F64).unwrap();
        let back = load_model(&Archive::read(&path).unwrap(), PARAM_PREFIX).unwrap();
        assert_eq!(back.config, net.config);
        for (a, b) in back.params.iter().zip(&net.params) {
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Writing the reloaded model reproduces the file byte for byte.
        let again = dir.path().join("m2.ckpt");
        save_model(&again, &back, DType::F64).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn f32_buffers_roundtrip_f32_values() {
        let mut a = Archive::new(serde_json::json!({"step": 3}));
        a.push("x", Tensor::new(vec![2], vec![0.5, -1.25]));
        let b = Archive::from_bytes(&a.to_bytes(DType::F32)).unwrap();
        assert_eq!(b, a);
    }

    #[test]
    fn truncation_is_detected() {
        let mut a = Archive::new(serde_json::json!({}));
        a.push("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let bytes = a.to_bytes(DType::F64);
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"not a checkpoint").is_err());
    }
}
