//! Versioned binary checkpoint.
//!
//! ```text
//! magic      8 bytes  "ARPTOYLM"
//! version    u32 LE
//! config_len u32 LE, then that many bytes of TOML (the full ToyLmConfig,
//!            optimizer settings included)
//! n_params   u64 LE
//! weights    n_params f32 LE, tensor blocks in layout order, row-major
//! checksum   32 bytes SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ToyLmConfig;
use super::model::ToyLm;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARPTOYLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &ToyLm<f32>) -> Vec<u8> {
    let config = model.config.to_toml();
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyLm<f32>> {
    if bytes.len() < 8 + 4 + 4 + 8 + 32 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a toy-model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Checksum { expected: hex::encode(trailer), found: hex::encode(digest) });
    }
    let config_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let config_end = 16 + config_len;
    if body.len() < config_end + 8 {
        return Err(Error::Format("checkpoint truncated in config".into()));
    }
    let config_text = std::str::from_utf8(&body[16..config_end])
        .map_err(|e| Error::Format(format!("checkpoint config is not UTF-8: {e}")))?;
    let config = ToyLmConfig::from_toml(config_text)?;
    let n = u64::from_le_bytes(body[config_end..config_end + 8].try_into().expect("8 bytes")) as usize;
    let weights = &body[config_end + 8..];
    if weights.len() != 4 * n {
        return Err(Error::Format(format!("expected {} weight bytes, found {}", 4 * n, weights.len())));
    }
    let params = weights
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    ToyLm::from_params(config, params)
}

pub fn save_checkpoint(model: &ToyLm<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyLm<f32>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
