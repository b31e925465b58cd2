//! Single-file checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"MODADDCK"
//! 8       4     format version (u32, currently 1)
//! 12      4     header length H (u32)
//! 16      H     header, UTF-8 JSON (see `Header`)
//! 16+H    4*N   parameter data: f32 values of every array listed in the
//!               header, in header order, each row-major
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The header lists `{name, shape}` for each array so readers in other
//! languages need nothing beyond a JSON parser. Decoding rejects trailing
//! bytes, digest mismatches, and arrays that disagree with the config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Model, ModelConfig, ModelError, ParamSet};
use crate::numerics::Array;

pub const MAGIC: &[u8; 8] = b"MODADDCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
/// Generous bound on the JSON header; real headers are a few KiB.
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    /// SHA-256 of the config's JSON encoding.
    pub config_hash: String,
    pub vocab_hash: String,
    pub registry_hash: String,
    /// Optimizer steps taken.
    pub step: usize,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub vocab_hash: String,
    pub registry_hash: String,
}

pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            config_hash: config_hash(&self.model.config),
            vocab_hash: self.vocab_hash.clone(),
            registry_hash: self.registry_hash.clone(),
            step: self.step,
            arrays: self
                .model
                .params
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.model.params.count() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in self.model.params.iter() {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(CheckpointError::Truncated("shorter than the fixed fields"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Digest);
        }
        Self::decode_body(body)
    }

    fn decode_body(body: &[u8]) -> Result<Self, CheckpointError> {
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        if header_len > MAX_HEADER || 16 + header_len > body.len() {
            return Err(CheckpointError::Truncated("header"));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + header_len])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.config_hash != config_hash(&header.config) {
            return Err(CheckpointError::Header("config hash does not match config".into()));
        }
        let mut data = &body[16 + header_len..];
        // Check every shape and the total size before allocating anything.
        let mut total = 0usize;
        for entry in &header.arrays {
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Header(format!("`{}` shape overflows", entry.name)))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| CheckpointError::Header("array sizes overflow".into()))?;
        }
        if total.checked_mul(4) != Some(data.len()) {
            return Err(CheckpointError::Truncated("parameter data length does not match header"));
        }
        header.config.validate()?;
        // Each layer owns several arrays; this bounds `param_shapes` below.
        if header.config.n_layers > header.arrays.len() {
            return Err(CheckpointError::Header("more layers than arrays".into()));
        }
        let expected = header.config.param_shapes();
        if expected.len() != header.arrays.len()
            || expected
                .iter()
                .zip(&header.arrays)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(CheckpointError::Header("arrays do not match the model config".into()));
        }
        let mut entries = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            let (chunk, rest) = data.split_at(4 * n);
            data = rest;
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let array = Array::from_vec(&entry.shape, values).map_err(ModelError::from)?;
            entries.push((entry.name.clone(), array));
        }
        let model = Model::from_params(header.config, ParamSet::new(entries))?;
        Ok(Self {
            model,
            step: header.step,
            vocab_hash: header.vocab_hash,
            registry_hash: header.registry_hash,
        })
    }

    /// Decodes without checking the trailing digest, so fuzzers can reach
    /// the header and data validation.
    #[doc(hidden)]
    pub fn decode_unverified(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("shorter than the fixed fields"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        Self::decode_body(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
