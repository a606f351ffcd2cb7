//! Self-describing binary checkpoint container.
//!
//! Layout: magic `GSW1`, u32 LE header length, header JSON (format version,
//! config, step count, RNG state, and the parameter manifest), then one
//! 32-bit little-endian blob per parameter in declaration order.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use super::model::{GsaConfig, GsaModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSW1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: GsaConfig,
    pub step_count: u64,
    pub rng_state: RngState,
    /// Free-form metadata (e.g. the standardization constants the model was
    /// trained with).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn save_checkpoint<W: Write>(
    model: &GsaModel,
    step_count: u64,
    rng_state: RngState,
    out: W,
) -> Result<()> {
    save_checkpoint_full(model, step_count, rng_state, None, out)
}

pub fn save_checkpoint_full<W: Write>(
    model: &GsaModel,
    step_count: u64,
    rng_state: RngState,
    extra: Option<serde_json::Value>,
    mut out: W,
) -> Result<()> {
    let mut entries = Vec::new();
    model.params.visit(&mut |name, t| {
        entries.push(ParamEntry { name, rows: t.rows(), cols: t.cols() });
    });
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config.clone(),
        step_count,
        rng_state,
        extra,
        params: entries,
    };
    let header = serde_json::to_vec(&meta)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut io_err: Option<std::io::Error> = None;
    model.params.visit(&mut |_, t| {
        if io_err.is_some() {
            return;
        }
        for &v in &t.data {
            if let Err(e) = out.write_all(&(v as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<(GsaModel, CheckpointMeta)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config("not a model checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format_version {}",
            meta.format_version
        )));
    }
    let mut model = GsaModel::new(meta.config.clone(), 0)?;

    // Verify the manifest matches this build's declaration order, then fill.
    let mut expected = Vec::new();
    model.params.visit(&mut |name, t| {
        expected.push(ParamEntry { name, rows: t.rows(), cols: t.cols() });
    });
    if expected.len() != meta.params.len() {
        return Err(Error::Config("checkpoint parameter manifest mismatch".into()));
    }
    for (a, b) in expected.iter().zip(&meta.params) {
        if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Config(format!(
                "checkpoint entry mismatch: expected {}({}x{}), found {}({}x{})",
                a.name, a.rows, a.cols, b.name, b.rows, b.cols
            )));
        }
    }
    let mut buf = [0u8; 4];
    for t in model.params.flatten_mut() {
        for v in &mut t.data {
            input.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf) as f64;
        }
    }
    Ok((model, meta))
}
