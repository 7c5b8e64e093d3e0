//! Checkpoint container.
//!
//! ```text
//! "VQKC"                      magic, 4 bytes
//! u16                         format version (1)
//! u32 + bytes                 JSON config snapshot {"model": .., "train": ..}
//! u32                         parameter count N
//! N × tensor                  u16 name length, UTF-8 name, u8 rank,
//!                             rank × u32 dims, f64 values
//! u64                         optimizer step
//! N × f64 values              first moments, same order and shapes
//! N × f64 values              second moments
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VQKC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    model: ModelConfig,
    train: TrainConfig,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {}: needed {n} more bytes",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let snapshot = serde_json::to_vec(&Snapshot {
            model: self.model.clone(),
            train: self.train.clone(),
        })
        .expect("config snapshot serializes");
        out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
        out.extend_from_slice(&snapshot);
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"VQKC\"")));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let snapshot: Snapshot = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        snapshot.model.validate()?;

        // A freshly initialized model supplies the expected names and shapes.
        let mut params = ModelParams::init(&snapshot.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameter tensors, model needs {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &name != want_name || &shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "found `{name}` {shape:?}, expected `{want_name}` {want_shape:?}"
                )));
            }
            let data = r.f64s(shape.iter().product())?;
            loaded.push(Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?);
        }
        for (slot, t) in params.values_mut().into_iter().zip(&loaded) {
            *slot = t.clone();
        }
        let step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * count);
        for (_, shape) in expected.iter().chain(&expected) {
            let data = r.f64s(shape.iter().product())?;
            moments.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = moments.split_off(count);
        Ok(Self {
            model: snapshot.model,
            train: snapshot.train,
            params,
            optimizer: OptimizerState { step, m: moments, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
