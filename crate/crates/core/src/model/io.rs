//! Binary checkpoint format.
//!
//! ```text
//! magic   b"DROPECKP"
//! version u32 LE
//! len     u64 LE        length of the JSON table
//! table   JSON          metadata + (name, group, shape, dtype, offset) per tensor
//! payload f64 LE        tensors back to back, offsets in elements
//! check   u64 LE        first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{AdamState, Checkpoint};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

pub const MAGIC: &[u8; 8] = b"DROPECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Table {
    config: ModelConfig,
    step: usize,
    tokens_seen: u64,
    rng: Option<RngState>,
    provenance: Vec<String>,
    adam_step: Option<usize>,
    tensors: Vec<Entry>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut groups: Vec<(Group, &BTreeMap<String, Tensor>)> = vec![(Group::Param, &ck.params)];
    if let Some(opt) = &ck.optimizer {
        groups.push((Group::AdamM, &opt.m));
        groups.push((Group::AdamV, &opt.v));
    }
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (group, map) in &groups {
        for (name, t) in *map {
            tensors.push(Entry {
                name: name.clone(),
                group: *group,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += t.len();
        }
    }
    let table = Table {
        config: ck.config.clone(),
        step: ck.step,
        tokens_seen: ck.tokens_seen,
        rng: ck.rng.clone(),
        provenance: ck.provenance.clone(),
        adam_step: ck.optimizer.as_ref().map(|o| o.step),
        tensors,
    };
    let json = serde_json::to_vec(&table)?;
    let mut out = Vec::with_capacity(28 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, map) in &groups {
        for t in map.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Parse bytes produced by [`encode_checkpoint`]; `origin` labels errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
    if bytes.len() < 28 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(fail("checksum mismatch (corrupt or truncated file)".into()));
    }
    if &body[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let table_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(table_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("table length exceeds file".into()))?;
    let table: Table = serde_json::from_slice(&body[20..payload_start])?;
    let payload = &body[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(fail("payload is not a whole number of f64 values".into()));
    }
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in table.tensors {
        if e.dtype != "f64" {
            return Err(fail(format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (8 * e.offset, 8 * (e.offset + n));
        let raw = payload.get(lo..hi).ok_or_else(|| fail(format!("tensor {} beyond payload", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| fail(err.to_string()))?;
        match e.group {
            Group::Param => params.insert(e.name, t),
            Group::AdamM => m.insert(e.name, t),
            Group::AdamV => v.insert(e.name, t),
        };
    }
    let ck = Checkpoint {
        config: table.config,
        params,
        optimizer: table.adam_step.map(|step| AdamState { step, m, v }),
        step: table.step,
        tokens_seen: table.tokens_seen,
        rng: table.rng,
        provenance: table.provenance,
    };
    ck.validate().map_err(|err| fail(err.to_string()))?;
    Ok(ck)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    // Write-then-rename so a checkpoint is never observed half written.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
