//! `TDMDL001` model files: 8-byte magic, little-endian `u32` header length,
//! JSON header (architecture plus tensor manifest), then every tensor as raw
//! little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, Layer, NetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"TDMDL001";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_model(params: &NetParams, arch: &ArchConfig) -> Result<Vec<u8>> {
    let header = ModelHeader {
        arch: arch.clone(),
        tensors: params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.num_params());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(ArchConfig, NetParams)> {
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::ModelFormat("missing TDMDL001 magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::ModelFormat(format!("header length {header_len} exceeds file")))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::ModelFormat(format!("header: {e}")))?;
    let expected = header
        .arch
        .layer_shapes()
        .map_err(|e| Error::ModelFormat(e.to_string()))?;
    if header.tensors.len() != 2 * expected.len() {
        return Err(Error::ModelFormat(format!(
            "manifest lists {} tensors, architecture needs {}",
            header.tensors.len(),
            2 * expected.len()
        )));
    }
    let reference = NetParams::zeros(&header.arch)?;
    for (entry, (name, t)) in header.tensors.iter().zip(reference.named_tensors()) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::ModelFormat(format!(
                "tensor `{}` {:?} does not match architecture `{name}` {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
    }
    let total: usize = reference.num_params();
    let payload = &bytes[header_end..];
    if payload.len() != 8 * total {
        return Err(Error::ModelFormat(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            8 * total
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, values.by_ref().take(n).collect())
    };
    let layers = expected
        .iter()
        .map(|(w, b)| {
            Ok(Layer {
                weight: take(w)?,
                bias: take(b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header.arch, NetParams::from_layers(layers)))
}

/// Writes a model file and returns the number of bytes written.
pub fn save_model(params: &NetParams, arch: &ArchConfig, path: &Path) -> Result<u64> {
    let bytes = encode_model(params, arch)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<(ArchConfig, NetParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_size() {
        let arch = ArchConfig::desk(3);
        let params = NetParams::init(&arch, 11).unwrap();
        let bytes = encode_model(&params, &arch).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(
            bytes.len(),
            12 + header_len + 8 * arch.num_params().unwrap()
        );
        let (arch2, params2) = decode_model(&bytes).unwrap();
        assert_eq!(arch2, arch);
        assert_eq!(params2, params);
    }

    #[test]
    fn tampered_header_length_is_rejected() {
        let arch = ArchConfig::desk(2);
        let params = NetParams::init(&arch, 1).unwrap();
        let mut bytes = encode_model(&params, &arch).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        bytes[8..12].copy_from_slice(&(len + 3).to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(Error::ModelFormat(_))));
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let arch = ArchConfig::desk(2);
        let params = NetParams::init(&arch, 1).unwrap();
        let mut bytes = encode_model(&params, &arch).unwrap();
        bytes.pop();
        assert!(decode_model(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_model(&bytes).is_err());
    }
}
