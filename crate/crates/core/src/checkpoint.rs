//! Versioned binary checkpoints.
//!
//! Layout: magic `MIGCCKPT`, `u32` format version, `u64` header length, JSON
//! header (model config, schedule constants, vocab table, parameter index),
//! then every parameter's values as little-endian `f64` in index order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::vocab::token_names;

pub const MAGIC: &[u8; 8] = b"MIGCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScheduleConstants {
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schedule: ScheduleConstants,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
    /// Free-form provenance (training stage, steps, source hashes).
    meta: serde_json::Value,
}

pub fn write_checkpoint(model: &Model, meta: serde_json::Value, w: &mut impl Write) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        schedule: ScheduleConstants {
            timesteps: model.config.timesteps,
            beta_start: model.config.beta_start,
            beta_end: model.config.beta_end,
        },
        vocab: token_names(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.params.iter() {
        let mut buf = Vec::with_capacity(p.value.numel() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Model and provenance metadata. All parameters come back unfrozen.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Model, serde_json::Value)> {
    let bad = |m: String| CoreError::Checkpoint(m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if header.vocab != token_names() {
        return Err(bad("vocabulary table differs from this build".into()));
    }
    let s = &header.schedule;
    let c = &header.config;
    if s.timesteps != c.timesteps || s.beta_start != c.beta_start || s.beta_end != c.beta_end {
        return Err(bad("schedule constants disagree with the model config".into()));
    }
    let mut model = Model::new(header.config, 0)?;
    if header.params.len() != model.params.len() {
        return Err(bad(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
        let t = model.params.value_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(format!("{}: stored shape {:?}, expected {:?}", entry.name, entry.shape, t.shape())));
        }
        let mut buf = vec![0u8; t.numel() * 8];
        r.read_exact(&mut buf)?;
        for (v, chunk) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !t.is_finite() {
            return Err(bad(format!("{}: non-finite values", entry.name)));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, header.meta))
}

pub fn save(model: &Model, meta: serde_json::Value, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, meta, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
