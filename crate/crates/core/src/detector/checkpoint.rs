//! Checkpoint layout: an 8-byte little-endian header length, a UTF-8 JSON
//! header (format tag, detector config, tensor names and shapes, optional
//! tag), then every parameter as a little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorModel, Params, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "stac-detector-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: DetectorConfig,
    pub tensors: Vec<TensorHeader>,
    #[serde(default)]
    pub tag: Option<String>,
}

pub fn to_bytes(model: &DetectorModel, tag: Option<&str>) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        tensors: model
            .params
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        tag: tag.map(str::to_string),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + model.params.len() * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(DetectorModel, CheckpointHeader)> {
    let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format '{}'", header.format)));
    }
    let mut floats = bytes[8 + hlen..].chunks_exact(8);
    if !floats.remainder().is_empty() {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in &header.tensors {
        let n: usize = th.shape.iter().product();
        let data: Vec<f64> = floats
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.len() != n {
            return Err(bad(&format!("tensor '{}' truncated", th.name)));
        }
        tensors.push(Tensor {
            name: th.name.clone(),
            shape: th.shape.clone(),
            data,
        });
    }
    if floats.next().is_some() {
        return Err(bad("trailing data"));
    }
    let model = DetectorModel::from_params(header.config.clone(), Params { tensors })?;
    Ok((model, header))
}

pub fn save(model: &DetectorModel, path: &Path, tag: Option<&str>) -> Result<()> {
    fs::write(path, to_bytes(model, tag)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(DetectorModel, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
