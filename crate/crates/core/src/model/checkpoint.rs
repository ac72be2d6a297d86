//! Versioned binary checkpoint: magic, version, dims, provenance hash and a
//! little-endian `f64` payload in parameter declaration order.

use std::path::Path;

use super::{GruEnhancerParams, ModelDims};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELAGRU\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub dims: ModelDims,
    /// Hash of the configuration that produced the weights.
    pub provenance: u64,
    pub payload: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn save(params: &GruEnhancerParams, provenance: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims: params.dims(),
            provenance,
            payload: params.params().flatten(),
        }
    }

    pub fn load(&self) -> Result<GruEnhancerParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        if self.payload.len() != self.dims.param_count() {
            return Err(Error::Checkpoint(format!(
                "payload has {} values, dims {:?} imply {}",
                self.payload.len(),
                self.dims,
                self.dims.param_count()
            )));
        }
        let mut params = GruEnhancerParams::zeros(self.dims)?;
        params.params_mut().load_flat(&self.payload)?;
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.dims.bands as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.hidden as u32).to_le_bytes());
        out.extend_from_slice(&self.provenance.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "not a model checkpoint (bad magic)".into(),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let dims = ModelDims {
            bands: u32_at(12) as usize,
            hidden: u32_at(16) as usize,
        };
        let provenance = u64_at(20);
        let count = u64_at(28) as usize;
        if bytes.len() != HEADER_LEN + 8 * count {
            return Err(Error::Checkpoint(format!(
                "truncated payload: {} bytes for {count} values",
                bytes.len() - HEADER_LEN
            )));
        }
        let payload = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = Self {
            version,
            dims,
            provenance,
            payload,
        };
        if count != dims.param_count() {
            return Err(Error::Checkpoint(format!(
                "payload has {count} values, dims {dims:?} imply {}",
                dims.param_count()
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
