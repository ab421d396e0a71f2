//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every parameter as raw little-endian `f64`s.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VaeModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FDVAECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in bytes from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    /// Free-form provenance (e.g. the training configuration).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &VaeModel, vocab_hash: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for p in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 8 * p.value.numel();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config,
        vocab_hash: vocab_hash.to_string(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &VaeModel, vocab_hash: &str, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, vocab_hash, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a checkpoint, rebuilding the model from the stored configuration
/// and checking every tensor's name and shape against it.
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(VaeModel, Header)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let data = &bytes[body..];
    // parameter values are overwritten below; the rng only shapes the store
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VaeModel::new(header.model, &mut rng)?;
    if header.tensors.len() != model.params.len() {
        return Err(format_err(
            path,
            format!(
                "expected {} tensors, found {}",
                model.params.len(),
                header.tensors.len()
            ),
        ));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let p = model.params.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(format_err(
                path,
                format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        let n = p.value.numel();
        let raw = data
            .get(entry.offset..entry.offset + 8 * n)
            .ok_or_else(|| format_err(path, format!("tensor {} is truncated", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.params.value_mut(id) = Tensor::new(entry.shape.clone(), values)?;
    }
    Ok((model, header))
}

pub fn load(path: &Path) -> Result<(VaeModel, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}

/// Loads a checkpoint and refuses it unless it was trained with the
/// vocabulary whose hash is `vocab_hash`.
pub fn load_for_vocab(path: &Path, vocab_hash: &str) -> Result<(VaeModel, Header)> {
    let (model, header) = load(path)?;
    if header.vocab_hash != vocab_hash {
        return Err(Error::VocabMismatch {
            expected: header.vocab_hash,
            found: vocab_hash.to_string(),
        });
    }
    Ok((model, header))
}
