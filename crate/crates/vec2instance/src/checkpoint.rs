//! Network checkpoints.
//!
//! Layout: the 8-byte magic `V2ICKPT\0`, a little-endian `u32` header
//! length, the JSON header, then every parameter tensor as little-endian
//! `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vec2instance_core::models::{build_by_arch, NetConfig};
use vec2instance_core::nn::Network;

use crate::error::{Error, Result};
use crate::io::{to_json_string, write_bytes};

const MAGIC: &[u8; 8] = b"V2ICKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: String,
    pub net: NetConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    /// Centroid trunk uses the instance widths (166,305 parameters) rather
    /// than uniform 32-filter convolutions.
    pub reconciled_widths: bool,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, typically the run configuration.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn encode(net: &Network<f32>, cfg: NetConfig, epoch: usize, run: serde_json::Value) -> Vec<u8> {
    let params = net.params();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch: net.arch.clone(),
        net: cfg,
        epoch,
        reconciled_widths: true,
        tensors: params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                len: p.len(),
            })
            .collect(),
        run,
    };
    let json = to_json_string(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for (_, p) in params {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::format(origin, m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(origin, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let mut net = build_by_arch::<f32>(&header.arch, &header.net)?;
    let expected: Vec<TensorEntry> = net
        .params()
        .iter()
        .map(|(name, p)| TensorEntry {
            name: name.clone(),
            len: p.len(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the architecture"));
    }
    let mut data = &bytes[12 + hlen..];
    if data.len() != 4 * net.param_count() {
        return Err(bad("parameter payload has the wrong length"));
    }
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v = f32::from_le_bytes(data[..4].try_into().expect("4 bytes"));
            data = &data[4..];
        }
    }
    Ok((net, header))
}

pub fn save(path: &Path, net: &Network<f32>, cfg: NetConfig, epoch: usize, run: serde_json::Value) -> Result<()> {
    write_bytes(path, &encode(net, cfg, epoch, run))
}

pub fn load(path: &Path) -> Result<(Network<f32>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
