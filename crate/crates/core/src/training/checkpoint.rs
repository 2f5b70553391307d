//! Binary checkpoint container.
//!
//! Layout: `b"COPV"`, version byte `1`, manifest length as `u64` little-endian,
//! the JSON manifest, then every tensor as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngSnapshot;

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"COPV";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model parameters, optimizer moments and the position of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngSnapshot,
    pub optim_step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    config_fingerprint: String,
    epoch: usize,
    rng: RngSnapshot,
    optim_step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 8 * t.data.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint(),
            epoch: self.epoch,
            rng: self.rng,
            optim_step: self.optim_step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(13 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing COPV magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(13..13usize.saturating_add(len))
            .ok_or_else(|| Error::Corruption("manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)
            .map_err(|e| Error::Corruption(format!("manifest unreadable: {e}")))?;
        if manifest.config.fingerprint() != manifest.config_fingerprint {
            return Err(Error::Corruption("config fingerprint mismatch".into()));
        }
        let data = &bytes[13 + len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.offset != expected {
                return Err(Error::Corruption(format!("tensor {} has offset {}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Corruption(format!("tensor {} truncated", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected += 8 * n as u64;
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        if expected as usize != data.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected as usize
            )));
        }
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            rng: manifest.rng,
            optim_step: manifest.optim_step,
            tensors,
        })
    }
}

/// Write to a temporary sibling, then rename into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
