//! Model file: a header line, one JSON manifest line, raw little-endian
//! `f32` tensor data, then the first 8 bytes of SHA-256 over everything
//! before them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::model::Model;
use super::{sha256_hex, TrainError};
use crate::autodiff::Tensor;
use crate::encoder::Vocab;
use crate::labelspace::LabelSpace;
use crate::params::ParamStore;

pub const MODEL_HEADER: &str = "icdlaat-model v1";
const HEADER_PREFIX: &str = "icdlaat-model ";
const CHECKSUM_LEN: usize = 8;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    fingerprint: String,
    config: TrainConfig,
    best_epoch: usize,
    vocab_size: usize,
    vocab_sha256: String,
    vocab: String,
    labels_sha256: String,
    labels: String,
    tensors: Vec<TensorEntry>,
    unreported_choices: Vec<String>,
}

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let d = Sha256::digest(bytes);
    d[..CHECKSUM_LEN].try_into().expect("digest is 32 bytes")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(super) fn to_bytes(model: &Model) -> Vec<u8> {
    let vocab = model.vocab.to_manifest();
    let labels = model.labels.to_manifest();
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|(_, name, t)| {
            let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.numel() * 4;
            e
        })
        .collect();
    let manifest = Manifest {
        fingerprint: model.fingerprint.clone(),
        config: model.config.clone(),
        best_epoch: model.best_epoch,
        vocab_size: model.vocab.len(),
        vocab_sha256: sha256_hex(vocab.as_bytes()),
        vocab,
        labels_sha256: sha256_hex(labels.as_bytes()),
        labels,
        tensors,
        unreported_choices: model.config.unreported_choices(),
    };
    let mut out = Vec::with_capacity(offset + 4096);
    out.extend_from_slice(MODEL_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&manifest).expect("manifest serializes").as_bytes());
    out.push(b'\n');
    for t in model.params.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum);
    out
}

pub(super) fn from_bytes(bytes: &[u8]) -> Result<Model, TrainError> {
    let format = |m: &str| TrainError::Format(m.to_string());
    let header_end = bytes.iter().position(|&b| b == b'\n');
    let header = header_end.map(|e| &bytes[..e]).unwrap_or(bytes);
    let header = String::from_utf8_lossy(header);
    if header != MODEL_HEADER {
        if let Some(found) = header.strip_prefix(HEADER_PREFIX) {
            return Err(TrainError::VersionMismatch { found: found.to_string() });
        }
        return Err(format("missing model header"));
    }
    if bytes.len() < CHECKSUM_LEN {
        return Err(TrainError::ChecksumMismatch);
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if checksum(body) != sum {
        return Err(TrainError::ChecksumMismatch);
    }

    let rest = &body[header_end.expect("header matched") + 1..];
    let manifest_end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| format("missing manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..manifest_end]).map_err(|e| TrainError::Format(format!("manifest: {e}")))?;
    let data = &rest[manifest_end + 1..];

    if sha256_hex(manifest.vocab.as_bytes()) != manifest.vocab_sha256
        || sha256_hex(manifest.labels.as_bytes()) != manifest.labels_sha256
    {
        return Err(format("embedded vocabulary or label space digest mismatch"));
    }
    let vocab = Vocab::from_manifest(&manifest.vocab)?;
    if vocab.len() != manifest.vocab_size {
        return Err(format("vocabulary size mismatch"));
    }
    let labels = LabelSpace::from_manifest(&manifest.labels).map_err(|e| TrainError::Format(e.to_string()))?;

    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n * 4 > data.len() {
            return Err(TrainError::Format(format!("tensor {} lies outside the data section", e.name)));
        }
        let values = data[e.offset..e.offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        params.add(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        expected_offset += n * 4;
    }
    if expected_offset != data.len() {
        return Err(format("trailing bytes after tensor data"));
    }

    let mut model = Model::assemble(vocab, labels, manifest.config, params, manifest.best_epoch)?;
    if model.fingerprint != manifest.fingerprint {
        return Err(format("fingerprint does not match the embedded configuration"));
    }
    model.checksum = Some(hex(sum));
    Ok(model)
}

/// Writes `model` to `path` and returns the file checksum as hex.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<String, TrainError> {
    let bytes = to_bytes(model);
    fs::write(path, &bytes)?;
    Ok(hex(&bytes[bytes.len() - CHECKSUM_LEN..]))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, TrainError> {
    from_bytes(&fs::read(path)?)
}
