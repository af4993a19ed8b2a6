//! IDX tensor files (the MNIST distribution format).
//!
//! Layout: two zero bytes, a type code, the number of dimensions, one
//! big-endian `u32` per dimension, then the row-major payload. Only the
//! unsigned-byte element type (`0x08`) is supported.

use std::path::Path;

use thiserror::Error;

use super::data::{Dataset, Instance};

pub const TYPE_U8: u8 = 0x08;
const KNOWN_TYPES: [u8; 6] = [0x08, 0x09, 0x0B, 0x0C, 0x0D, 0x0E];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("IDX header truncated: need {needed} bytes, have {have}")]
    TruncatedHeader { needed: usize, have: usize },
    #[error("bad IDX magic: leading bytes {0:02x} {1:02x} are not zero")]
    BadMagic(u8, u8),
    #[error("IDX type code {0:#04x} is not a valid IDX element type")]
    UnknownType(u8),
    #[error("IDX element type {0:#04x} is not supported (only unsigned bytes)")]
    UnsupportedType(u8),
    #[error("IDX payload truncated: shape needs {expected} bytes, file has {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("IDX payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("IDX shape overflows usize")]
    ShapeOverflow,
    #[error("{0}")]
    Mismatch(String),
    #[error("I/O error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// A decoded unsigned-byte tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader {
            needed: 4,
            have: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    let code = bytes[2];
    if !KNOWN_TYPES.contains(&code) {
        return Err(IdxError::UnknownType(code));
    }
    if code != TYPE_U8 {
        return Err(IdxError::UnsupportedType(code));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(IdxError::TruncatedHeader {
            needed: header,
            have: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(IdxError::ShapeOverflow)?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(IdxError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IdxError::TrailingBytes(payload.len() - expected));
    }
    Ok(IdxTensor {
        shape,
        data: payload.to_vec(),
    })
}

pub fn encode_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.shape.len() + tensor.data.len());
    out.extend_from_slice(&[0, 0, TYPE_U8, tensor.shape.len() as u8]);
    for &d in &tensor.shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Pairs an image tensor `(n, rows, cols, ...)` with a label tensor `(n)`.
/// Pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(
    images: &IdxTensor,
    labels: &IdxTensor,
    num_classes: usize,
) -> Result<Dataset, IdxError> {
    if labels.shape.len() != 1 || images.shape.is_empty() || images.shape[0] != labels.shape[0] {
        return Err(IdxError::Mismatch(format!(
            "image shape {:?} incompatible with label shape {:?}",
            images.shape, labels.shape
        )));
    }
    let n = labels.shape[0];
    let width: usize = images.shape[1..].iter().product();
    let instances = (0..n)
        .map(|i| {
            let px = &images.data[i * width..(i + 1) * width];
            Instance::new(
                px.iter().map(|&b| b as f64 / 255.0).collect(),
                labels.data[i] as f64,
            )
        })
        .collect();
    Dataset::new(instances, width, num_classes).map_err(|e| IdxError::Mismatch(e.to_string()))
}

fn read(path: &Path) -> Result<IdxTensor, IdxError> {
    let bytes = std::fs::read(path).map_err(|e| IdxError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_idx(&bytes)
}

/// Loads the MNIST training pair (`train-images-idx3-ubyte`,
/// `train-labels-idx1-ubyte`) from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset, IdxError> {
    let images = read(&dir.join("train-images-idx3-ubyte"))?;
    let labels = read(&dir.join("train-labels-idx1-ubyte"))?;
    dataset_from_idx(&images, &labels, 10)
}
