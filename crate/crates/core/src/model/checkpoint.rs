//! Binary checkpoint: magic, a JSON header with the configuration and
//! parameter shapes, then every parameter value as little-endian `f64` in
//! header order. Values round-trip bit for bit.

use super::{ModelConfig, ModelState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ELQCKPT\x01";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let ps = state.params();
    let header = Header {
        version: VERSION,
        config: state.config().clone(),
        params: ps
            .ids()
            .map(|id| Entry {
                name: ps.name(id).to_string(),
                shape: ps.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ps.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in ps.ids() {
        for v in ps.get(id).values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut data = bytes[16 + len..].chunks_exact(8);
    if data.len() * 8 != bytes.len() - 16 - len {
        return Err(bad("trailing bytes"));
    }
    let mut stored = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let values: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.len() != n {
            return Err(bad("truncated values"));
        }
        stored.push((e.name, Tensor::new(e.shape, values)?));
    }
    if data.next().is_some() {
        return Err(bad("more values than the header declares"));
    }
    ModelState::from_parts(header.config, stored)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&std::fs::read(path)?)
}
