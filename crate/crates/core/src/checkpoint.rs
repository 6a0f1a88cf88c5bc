//! Named-tensor checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  "OPCKPT01"
//! length  u32 LE   byte length of the manifest
//! manifest         UTF-8 JSON (see `Manifest`)
//! payload          tensors in manifest order, float32 little-endian
//! ```
//!
//! The manifest records the model configuration, every tensor name and
//! shape, and the content hash of the tensors. Adapter checkpoints also
//! record the hash of the base model they were trained against.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, ControlAdapterParams};
use crate::error::{Error, Result};
use crate::params::TensorMap;
use crate::unet::{tensor_map_hash, InpaintModelParams, UNetConfig};

pub const MAGIC: &[u8; 8] = b"OPCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub unet: UNetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
    pub content_hash: String,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(manifest: &Manifest, map: &TensorMap) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * map.num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for entry in &manifest.tensors {
        let v: Vec<f32> = map.get(&entry.name)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8], dtype: DType) -> Result<(Manifest, TensorMap)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| ckpt_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut offset = 12 + len;
    let mut map = TensorMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| ckpt_err(format!("truncated payload at tensor `{}`", entry.name)))?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        map.insert(
            entry.name.clone(),
            Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?,
        );
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(ckpt_err(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    let hash = tensor_map_hash(&map)?;
    if hash != manifest.content_hash {
        return Err(ckpt_err(format!(
            "content hash mismatch: manifest {}, payload {hash}",
            manifest.content_hash
        )));
    }
    Ok((manifest, map))
}

fn entries(map: &TensorMap) -> Vec<TensorEntry> {
    map.iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.dims().to_vec(),
        })
        .collect()
}

pub fn base_to_bytes(params: &InpaintModelParams) -> Result<Vec<u8>> {
    let manifest = Manifest {
        kind: CheckpointKind::Base,
        unet: params.config.clone(),
        adapter: None,
        base_hash: None,
        tensors: entries(&params.tensors),
        content_hash: params.content_hash()?,
    };
    encode(&manifest, &params.tensors)
}

pub fn base_from_bytes(bytes: &[u8], dtype: DType) -> Result<InpaintModelParams> {
    let (m, tensors) = decode(bytes, dtype)?;
    if m.kind != CheckpointKind::Base {
        return Err(ckpt_err("expected a base-model checkpoint"));
    }
    let params = InpaintModelParams {
        config: m.unet,
        tensors,
    };
    params.check_structure()?;
    Ok(params)
}

pub fn adapter_to_bytes(adapter: &ControlAdapterParams) -> Result<Vec<u8>> {
    let manifest = Manifest {
        kind: CheckpointKind::Adapter,
        unet: adapter.unet.clone(),
        adapter: Some(adapter.config.clone()),
        base_hash: Some(adapter.base_hash.clone()),
        tensors: entries(&adapter.tensors),
        content_hash: adapter.content_hash()?,
    };
    encode(&manifest, &adapter.tensors)
}

pub fn adapter_from_bytes(bytes: &[u8], dtype: DType) -> Result<ControlAdapterParams> {
    let (m, tensors) = decode(bytes, dtype)?;
    if m.kind != CheckpointKind::Adapter {
        return Err(ckpt_err("expected an adapter checkpoint"));
    }
    let config = m
        .adapter
        .ok_or_else(|| ckpt_err("adapter checkpoint without adapter config"))?;
    let base_hash = m
        .base_hash
        .ok_or_else(|| ckpt_err("adapter checkpoint without base hash"))?;
    let adapter = ControlAdapterParams {
        unet: m.unet,
        config,
        tensors,
        base_hash,
    };
    adapter.check_structure()?;
    Ok(adapter)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)?;
    if &head[..8] != MAGIC {
        return Err(ckpt_err(format!("{} is not a checkpoint", path.display())));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut body = vec![0u8; len];
    f.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_base(path: &Path, params: &InpaintModelParams) -> Result<()> {
    write_atomic(path, &base_to_bytes(params)?)
}

pub fn load_base(path: &Path) -> Result<InpaintModelParams> {
    base_from_bytes(&std::fs::read(path)?, DType::F32)
}

pub fn save_adapter(path: &Path, adapter: &ControlAdapterParams) -> Result<()> {
    write_atomic(path, &adapter_to_bytes(adapter)?)
}

pub fn load_adapter(path: &Path) -> Result<ControlAdapterParams> {
    adapter_from_bytes(&std::fs::read(path)?, DType::F32)
}
