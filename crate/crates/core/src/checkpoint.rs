//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then raw little-endian `f32` payloads in manifest order. The manifest
//! lists every array with its section, shape and byte offset relative to the
//! start of the payload area.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamSpec, ParamStore};
use crate::training::AdamW;

pub const MAGIC: &[u8; 8] = b"TSFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub section: Section,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    /// Free-form run configuration recorded by the caller.
    #[serde(default)]
    pub run: serde_json::Value,
    pub seed: u64,
    pub step: usize,
    pub arrays: Vec<ArrayEntry>,
}

/// Everything a checkpoint restores.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub opt: Option<AdamW<f32>>,
    pub seed: u64,
    pub step: usize,
    pub run: serde_json::Value,
}

pub fn to_bytes(
    model: &Model<f32>,
    opt: Option<&AdamW<f32>>,
    seed: u64,
    step: usize,
    run: serde_json::Value,
) -> Result<Vec<u8>> {
    let store = model.store();
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(4 * store.total() * if opt.is_some() { 3 } else { 1 });
    let mut push = |section: Section, spec: &ParamSpec, values: &[f32], arrays: &mut Vec<ArrayEntry>| {
        arrays.push(ArrayEntry {
            name: spec.name.clone(),
            section,
            rows: spec.rows,
            cols: spec.cols,
            offset: payload.len() as u64,
        });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (spec, v) in store.specs().iter().zip(store.values()) {
        push(Section::Param, spec, v, &mut arrays);
    }
    if let Some(opt) = opt {
        for (spec, v) in store.specs().iter().zip(&opt.m) {
            push(Section::AdamM, spec, v, &mut arrays);
        }
        for (spec, v) in store.specs().iter().zip(&opt.v) {
            push(Section::AdamV, spec, v, &mut arrays);
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        model: model.config().clone(),
        run,
        seed,
        step,
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses only the header, leaving payloads untouched.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch {
            field: "version".into(),
            detail: format!("file has format {}, this build reads {}", header.version, FORMAT_VERSION),
        });
    }
    Ok((header, &body[len..]))
}

fn read_array(payload: &[u8], entry: &ArrayEntry) -> Result<Vec<f32>> {
    let start = entry.offset as usize;
    let end = start + 4 * entry.rows * entry.cols;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("array '{}' runs past the end of the file", entry.name)))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_header(bytes)?;
    let mut specs = Vec::new();
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for entry in &header.arrays {
        let values = read_array(payload, entry)?;
        match entry.section {
            Section::Param => {
                specs.push(ParamSpec {
                    name: entry.name.clone(),
                    rows: entry.rows,
                    cols: entry.cols,
                });
                params.push(values);
            }
            Section::AdamM => m.push(values),
            Section::AdamV => v.push(values),
        }
    }
    let store = ParamStore::from_parts(specs, params)
        .ok_or_else(|| Error::Checkpoint("array sizes disagree with their shapes".into()))?;
    let model = Model::from_store(header.model, store)?;
    let opt = if m.is_empty() && v.is_empty() {
        None
    } else {
        let shapes_ok = m.len() == model.store().len()
            && v.len() == m.len()
            && m.iter().zip(&v).zip(model.store().values()).all(|((a, b), p)| a.len() == p.len() && b.len() == p.len());
        if !shapes_ok {
            return Err(Error::CheckpointMismatch {
                field: "optimizer".into(),
                detail: "moment arrays do not match the parameters".into(),
            });
        }
        Some(AdamW { m, v })
    };
    Ok(Checkpoint {
        model,
        opt,
        seed: header.seed,
        step: header.step,
        run: header.run,
    })
}

pub fn save(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    opt: Option<&AdamW<f32>>,
    seed: u64,
    step: usize,
    run: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, opt, seed, step, run)?;
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Fails with the first model field whose value differs between the
/// configuration a caller expects and the one stored in a checkpoint.
pub fn check_compatible(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let to_map = |c: &ModelConfig| match serde_json::to_value(c) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("model config serializes to an object"),
    };
    let (want, have) = (to_map(expected), to_map(found));
    for (field, w) in &want {
        let h = have.get(field).unwrap_or(&serde_json::Value::Null);
        if w != h {
            return Err(Error::CheckpointMismatch {
                field: field.clone(),
                detail: format!("config has {w}, checkpoint has {h}"),
            });
        }
    }
    Ok(())
}
