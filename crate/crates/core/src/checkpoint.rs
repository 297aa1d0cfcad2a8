//! Checkpoint container: magic bytes, a length-prefixed JSON header with
//! the model config and tensor directory, then raw little-endian f64
//! payloads in directory order. Saving and loading round-trip bit-exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Arr;
use crate::lm::ModelSpec;
use crate::optim::AdamState;
use crate::params::{InitOptions, ParamSet};

pub const MAGIC: &[u8; 8] = b"RMTCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    model: ModelSpec,
    step: u64,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

pub struct LoadedCheckpoint {
    pub model: ModelSpec,
    pub step: u64,
    pub params: ParamSet,
    pub adam: AdamState,
}

fn push_entry(tensors: &mut Vec<TensorEntry>, offset: &mut u64, name: String, arr: &Arr) {
    tensors.push(TensorEntry {
        name,
        shape: arr.shape().to_vec(),
        dtype: "f64".into(),
        offset: *offset,
    });
    *offset += 8 * arr.len() as u64;
}

/// Directory order: parameter tensors in canonical order, then their Adam
/// first moments, then second moments.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelSpec,
    step: u64,
    params: &ParamSet,
    adam: &AdamState,
) -> Result<()> {
    if adam.m.len() != params.len() || adam.v.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} optimizer moment pairs for {} parameters",
            adam.m.len(),
            params.len()
        )));
    }
    let mut tensors = Vec::with_capacity(3 * params.len());
    let mut offset = 0u64;
    for e in params.iter() {
        push_entry(&mut tensors, &mut offset, e.name.clone(), &e.value);
    }
    for (e, m) in params.iter().zip(&adam.m) {
        push_entry(&mut tensors, &mut offset, format!("adam.m.{}", e.name), m);
    }
    for (e, v) in params.iter().zip(&adam.v) {
        push_entry(&mut tensors, &mut offset, format!("adam.v.{}", e.name), v);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        step,
        adam_t: adam.t,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut write_arr = |arr: &Arr| -> Result<()> {
        for &x in arr.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    };
    for e in params.iter() {
        write_arr(&e.value)?;
    }
    for m in &adam.m {
        write_arr(m)?;
    }
    for v in &adam.v {
        write_arr(v)?;
    }
    Ok(())
}

fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Result<Arr> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 8 * numel;
    if end > payload.len() {
        return Err(Error::Checkpoint(format!(
            "tensor {} at offset {start} overruns payload of {} bytes",
            entry.name,
            payload.len()
        )));
    }
    let data: Vec<f64> = payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Arr::from_shape_vec(entry.shape.clone(), data)
        .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing RMTCKPT1 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("header length overruns file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[16 + header_len..];

    // The parameter set is rebuilt from the stored config so names, order,
    // and decay flags are canonical; every tensor is then overwritten from
    // the file, and the directory must cover the parameters exactly.
    let mut params = header.model.init(0, &InitOptions::default())?;
    let n = params.len();
    let mut seen = vec![[false; 3]; n];
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
    }
    let mut adam = AdamState::new(&params);
    adam.t = header.adam_t;
    let index: std::collections::HashMap<String, usize> = params
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.clone(), i))
        .collect();
    for entry in &header.tensors {
        let (slot, base) = if let Some(rest) = entry.name.strip_prefix("adam.m.") {
            (1, rest)
        } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
            (2, rest)
        } else {
            (0, entry.name.as_str())
        };
        let i = *index
            .get(base)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if seen[i][slot] {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
        seen[i][slot] = true;
        let arr = read_tensor(payload, entry)?;
        let dst = match slot {
            0 => &mut params.entry_mut(i).value,
            1 => &mut adam.m[i],
            _ => &mut adam.v[i],
        };
        if arr.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name,
                arr.shape(),
                dst.shape()
            )));
        }
        *dst = arr;
    }
    for (i, flags) in seen.iter().enumerate() {
        if flags.iter().any(|f| !f) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensors for parameter {}",
                params.entry(i).name
            )));
        }
    }
    Ok(LoadedCheckpoint {
        model: header.model,
        step: header.step,
        params,
        adam,
    })
}
