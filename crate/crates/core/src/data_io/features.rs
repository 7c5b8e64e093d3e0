//! Binary feature container.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "VQKF"
//! 4       2      format version, u16 LE (currently 1)
//! 6       4      T (segments), u32 LE
//! 10      4      D (feature width), u32 LE
//! 14      4·T·D  row-major f32 LE payload
//! ```

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"VQKF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureFileError {
    #[error("bad magic {found:?}, expected \"VQKF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (expected {FEATURE_VERSION})")]
    Version { found: u16 },
    #[error("file too short for header: {actual} bytes")]
    ShortHeader { actual: usize },
    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite feature value at flat index {index}")]
    NonFinite { index: usize },
}

/// Encodes a T×D matrix. Values are narrowed to f32.
pub fn encode_features(features: &Tensor) -> Vec<u8> {
    assert_eq!(features.rank(), 2, "features must be a T×D matrix");
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor, FeatureFileError> {
    if bytes.len() < HEADER_LEN {
        return Err(FeatureFileError::ShortHeader { actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(FeatureFileError::Version { found: version });
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = 4 * t * d;
    if payload.len() != expected {
        return Err(FeatureFileError::Length {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(FeatureFileError::NonFinite { index });
    }
    Ok(Tensor::from_parts(vec![t, d], data))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|source| Error::FeatureFile {
        path: path.to_path_buf(),
        source,
    })
}
