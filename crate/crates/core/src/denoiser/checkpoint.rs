//! Checkpoint files.
//!
//! One UTF-8 JSON header line terminated by `\n`:
//!
//! ```text
//! {"format":"linex-denoiser","version":1,"config":{...},"n_params":N,"sha256":"<hex>"}
//! ```
//!
//! followed by exactly `8·N` bytes: every parameter as an IEEE-754 double,
//! little endian, in canonical flattening order (each matrix column-major,
//! matrices in `Net::visit` order). `sha256` covers the payload bytes only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{init_denoiser, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};

const FORMAT: &str = "linex-denoiser";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: DenoiserConfig,
    n_params: usize,
    sha256: String,
}

fn payload_bytes(flat: &[f64]) -> Vec<u8> {
    flat.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn payload_hash(flat: &[f64]) -> String {
    hex::encode(Sha256::digest(payload_bytes(flat)))
}

pub fn save_checkpoint(params: &DenoiserParams, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let flat = params.net.flatten();
    let payload = payload_bytes(&flat);
    let sha256 = hex::encode(Sha256::digest(&payload));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        n_params: flat.len(),
        sha256: sha256.clone(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    bytes.push(b'\n');
    bytes.extend(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.n_params * 8 {
        return Err(Error::Checkpoint(format!("payload has {} bytes, header promises {}", payload.len(), header.n_params * 8)));
    }
    if hex::encode(Sha256::digest(payload)) != header.sha256 {
        return Err(Error::Checkpoint("payload hash mismatch".into()));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = init_denoiser(&header.config)?;
    params.net.assign_flat(&flat)?;
    Ok(params)
}
