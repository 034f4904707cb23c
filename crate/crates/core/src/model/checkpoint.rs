//! Checkpoint layout: `u64` little-endian header length, a JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let entries = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 4;
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated length prefix"))?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize.checked_add(hlen).ok_or_else(|| bad("bad header length"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| bad("truncated header"))?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::Checkpoint(format!("{}: unexpected offset {}", e.name, e.offset)));
        }
        let raw = data
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", e.name)))?;
        let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(e.shape.clone(), vals)?);
        expected_offset += 4 * n;
    }
    if expected_offset != data.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let params = ModelParams::from_tensors(&header.config, tensors)?;
    if params.names().iter().ne(header.tensors.iter().map(|e| &e.name)) {
        return Err(bad("tensor names do not match the model layout"));
    }
    Ok(params)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Hex SHA-256 of a checkpoint file.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
