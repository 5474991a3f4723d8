//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `FEDDISCK`, a little-endian `u64` manifest length,
//! the JSON manifest, then every leaf's values as little-endian `f32` in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Leaf, LeafKind, ModelParams, PathTag};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"FEDDISCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafEntry {
    pub name: String,
    pub path: PathTag,
    pub kind: LeafKind,
    pub dims: Vec<usize>,
    /// Offset in values (not bytes) from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub disentangled: bool,
    pub init_seed: u64,
    /// Additional named seeds of the run that produced the parameters.
    pub seeds: BTreeMap<String, u64>,
    pub leaves: Vec<LeafEntry>,
}

pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>, seeds: &BTreeMap<String, u64>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let leaves = params
        .leaves
        .iter()
        .map(|l| {
            let e = LeafEntry {
                name: l.name.clone(),
                path: l.path,
                kind: l.kind,
                dims: l.dims.clone(),
                offset,
            };
            offset += l.values.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: 1,
        arch: params.arch.clone(),
        disentangled: params.disentangled,
        init_seed: params.seed,
        seeds: seeds.clone(),
        leaves,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for leaf in &params.leaves {
        for v in &leaf.values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json)?;
    let data = &bytes[16 + mlen..];
    let leaves = manifest
        .leaves
        .iter()
        .map(|e| {
            let n: usize = e.dims.iter().product();
            let raw = data
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| bad(&format!("data for leaf {} is truncated", e.name)))?;
            Ok(Leaf {
                name: e.name.clone(),
                path: e.path,
                kind: e.kind,
                dims: e.dims.clone(),
                values: raw
                    .chunks_exact(4)
                    .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams {
        arch: manifest.arch.clone(),
        disentangled: manifest.disentangled,
        seed: manifest.init_seed,
        leaves,
    };
    crate::model::Autoencoder::for_params(&params).map_err(|e| bad(&e.to_string()))?;
    Ok((params, manifest))
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, seeds: &BTreeMap<String, u64>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(params, seeds)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bit_exact_for_f32() {
        let arch = ArchConfig {
            base_filters: 8,
            max_filters: 16,
            bottleneck_channels: 16,
            input_size: (32, 32),
            ..ArchConfig::default()
        };
        let params = init_model::<f32>(&arch, 5, true).unwrap();
        let mut seeds = BTreeMap::new();
        seeds.insert("federation".to_string(), 99);
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.ckpt");
        save_checkpoint(&params, &seeds, &p).unwrap();
        let (back, manifest) = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(manifest.seeds, seeds);
        assert_eq!(encode_checkpoint(&back, &seeds).unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let r = decode_checkpoint::<f32>(b"not a checkpoint at all", Path::new("x"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }
}
