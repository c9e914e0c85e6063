//! Checkpoint directory: `params.bin` (little-endian `f32`, manifest order)
//! and `model.json` (spec, fingerprint, stage, ordered entry list).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelSpec, Stage};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::phantom::io::{read_json, write_json};

pub const PARAMS_BIN: &str = "params.bin";
pub const MODEL_JSON: &str = "model.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Last completed training stage.
    pub stage: Stage,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fingerprint: String,
    stage: Stage,
    spec: ModelSpec,
    entries: Vec<Entry>,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &ckpt.params;
    let bytes: Vec<u8> = p
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let bin = dir.join(PARAMS_BIN);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let header = Header {
        fingerprint: p.fingerprint(),
        stage: ckpt.stage,
        spec: p.spec().clone(),
        entries: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_json(&dir.join(MODEL_JSON), &header)
}

/// Loads a checkpoint; with `expected`, its spec fingerprint must match.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelSpec>) -> Result<Checkpoint> {
    let header: Header = read_json(&dir.join(MODEL_JSON))?;
    if header.fingerprint != header.spec.fingerprint() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} fingerprint does not match its own spec",
            dir.join(MODEL_JSON).display()
        )));
    }
    if let Some(spec) = expected {
        if spec.fingerprint() != header.fingerprint {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was written for a different model spec",
                dir.display()
            )));
        }
    }
    let bin = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::RawSizeMismatch {
            path: bin,
            expected: total as u64 * 4,
            found: bytes.len() as u64,
        });
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut names = Vec::with_capacity(header.entries.len());
    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        tensors.push(Tensor::new(e.shape, values.by_ref().take(n).collect())?);
        names.push(e.name);
    }
    let params = ModelParams::from_parts(header.spec, names, tensors)?;
    Ok(Checkpoint {
        params,
        stage: header.stage,
    })
}
