//! `SDM1` checkpoints.
//!
//! Layout: the 4 bytes `SDM1`, a little-endian `u32` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f32`
//! values in header order. Model parameters come first; optimizer moments
//! follow as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::SegModel;
use super::optim::Adam;
use super::params::ParamStore;
use super::train::Progress;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const MAGIC: &[u8; 4] = b"SDM1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    epoch: usize,
    adam_t: Option<u64>,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub adam: Option<Adam>,
    pub progress: Progress,
    /// Free-form run metadata, stored verbatim.
    pub meta: serde_json::Value,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ck.model.params;
    let mut entries: Vec<TensorEntry> = params
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut payload: Vec<&Tensor> = params.tensors().iter().collect();
    if let Some(adam) = &ck.adam {
        for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
            for ((n, _), t) in params.iter().zip(moments) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{n}"),
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
    }
    let header = Header {
        config: ck.model.config.clone(),
        step: ck.progress.step,
        epoch: ck.progress.epoch,
        adam_t: ck.adam.as_ref().map(|a| a.t),
        meta: ck.meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * payload.iter().map(|t| t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "missing SDM1 magic"));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = 8 + hlen;
    if bytes.len() < body {
        return Err(Error::format(bytes.len() as u64, format!("header of {hlen} bytes is truncated")));
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..body]).map_err(|e| Error::format(8, format!("bad header JSON: {e}")))?;
    header.config.validate().map_err(|e| Error::format(8, e.to_string()))?;

    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(
                bytes.len() as u64,
                format!("tensor {} needs {} bytes from offset {offset}", entry.name, 4 * n),
            ));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(offset as u64, "trailing bytes after last tensor"));
    }

    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            check_moment(&params, rest, m.len(), &t)?;
            m.push(t);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            check_moment(&params, rest, v.len(), &t)?;
            v.push(t);
        } else {
            params.insert(name, t).map_err(|e| Error::format(8, e.to_string()))?;
        }
    }
    let model = SegModel::from_parts(header.config, params).map_err(|e| Error::format(8, e.to_string()))?;
    let adam = match header.adam_t {
        Some(t) if m.len() == model.params.len() && v.len() == model.params.len() => Some(Adam { m, v, t }),
        None if m.is_empty() && v.is_empty() => None,
        _ => return Err(Error::format(8, "incomplete optimizer state")),
    };
    Ok(Checkpoint {
        model,
        adam,
        progress: Progress {
            step: header.step,
            epoch: header.epoch,
        },
        meta: header.meta,
    })
}

fn check_moment(params: &ParamStore, name: &str, i: usize, t: &Tensor) -> Result<()> {
    match params.names().get(i) {
        Some(n) if n == name && params.tensors()[i].shape() == t.shape() => Ok(()),
        _ => Err(Error::format(8, format!("optimizer moment {name} out of order or misshapen"))),
    }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
