//! `DDL1` checkpoint container shared by experts and routers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DDL1"              4 bytes magic
//! header_len: u32     length of the JSON header in bytes
//! header: JSON        {kind, layer_dims, m, cluster_id, seed, activation,
//!                      train_config_hash, tensors}
//! tensors             for each name in `tensors` (W0, b0, W1, b1, ...):
//!                     row-major f32 values
//! ```
//!
//! `W{l}` has shape `layer_dims[l+1] × layer_dims[l]`, `b{l}` has length
//! `layer_dims[l+1]`. Parameters are stored at 32-bit precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowexperts::Expert;
use crate::numcore::{Activation, DenseNet};
use crate::router::Router;

pub const MAGIC: &[u8; 4] = b"DDL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Expert,
    Router,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub m: usize,
    pub cluster_id: Option<usize>,
    pub seed: u64,
    pub activation: String,
    pub train_config_hash: u64,
    pub tensors: Vec<String>,
}

fn tensor_names(layers: usize) -> Vec<String> {
    (0..layers).flat_map(|l| [format!("W{l}"), format!("b{l}")]).collect()
}

pub fn encode(
    net: &DenseNet,
    kind: ModelKind,
    m: usize,
    cluster_id: Option<usize>,
    seed: u64,
    train_config_hash: u64,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind,
        layer_dims: net.layer_dims().to_vec(),
        m,
        cluster_id,
        seed,
        activation: net.activation().tag().to_string(),
        train_config_hash,
        tensors: tensor_names(net.num_layers()),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Checkpoint("header larger than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, DenseNet)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing DDL1 magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])?;
    if Activation::from_tag(&header.activation).is_none() {
        return Err(Error::Checkpoint(format!("unknown activation {:?}", header.activation)));
    }
    let dims = &header.layer_dims;
    if dims.len() < 2 {
        return Err(Error::Checkpoint("layer_dims needs at least two entries".into()));
    }
    if header.tensors != tensor_names(dims.len() - 1) {
        return Err(Error::Checkpoint(format!("unexpected tensor list {:?}", header.tensors)));
    }
    let mut data = &body[header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for l in 0..dims.len() - 1 {
        for len in [dims[l + 1] * dims[l], dims[l + 1]] {
            if data.len() < 4 * len {
                return Err(Error::Checkpoint("truncated tensor data".into()));
            }
            let (chunk, rest) = data.split_at(4 * len);
            tensors.push(
                chunk
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                    .collect(),
            );
            data = rest;
        }
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    let net = DenseNet::from_tensors(dims.clone(), tensors)?;
    Ok((header, net))
}

pub fn save_expert(path: &Path, expert: &Expert, seed: u64) -> Result<()> {
    let bytes = encode(
        &expert.net,
        ModelKind::Expert,
        expert.m,
        Some(expert.cluster_id),
        seed,
        expert.train_config_hash,
    )?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_expert(path: &Path) -> Result<Expert> {
    let (h, net) = decode(&std::fs::read(path)?)?;
    if h.kind != ModelKind::Expert {
        return Err(Error::Checkpoint(format!("{} is not an expert checkpoint", path.display())));
    }
    let id = h
        .cluster_id
        .ok_or_else(|| Error::Checkpoint("expert checkpoint without cluster_id".into()))?;
    Expert::new(net, id, h.m, h.train_config_hash)
}

pub fn save_router(path: &Path, router: &Router, seed: u64, train_config_hash: u64) -> Result<()> {
    let bytes = encode(&router.net, ModelKind::Router, router.m, None, seed, train_config_hash)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_router(path: &Path) -> Result<Router> {
    let (h, net) = decode(&std::fs::read(path)?)?;
    if h.kind != ModelKind::Router {
        return Err(Error::Checkpoint(format!("{} is not a router checkpoint", path.display())));
    }
    Router::new(net, h.m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_length_header_tensors() {
        let net = DenseNet::init(&[3, 2], 1).unwrap();
        let bytes = encode(&net, ModelKind::Router, 1, None, 7, 0).unwrap();
        assert_eq!(&bytes[..4], b"DDL1");
        let hl = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + hl + 4 * (6 + 2));
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hl]).unwrap();
        assert_eq!(header["tensors"], serde_json::json!(["W0", "b0"]));
        assert_eq!(header["activation"], "tanh");
        let w00 = f32::from_le_bytes(bytes[8 + hl..12 + hl].try_into().unwrap());
        assert_eq!(w00, net.weights()[0].data[0] as f32);
    }

    #[test]
    fn decoding_rounds_to_f32() {
        let mut net = DenseNet::init(&[4, 5, 2], 3).unwrap();
        let bytes = encode(&net, ModelKind::Expert, 1, Some(0), 3, 9).unwrap();
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h.cluster_id, Some(0));
        net.round_to_f32();
        assert_eq!(back, net);
        // a rounded net survives a second round trip unchanged
        let again = encode(&back, ModelKind::Expert, 1, Some(0), 3, 9).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_corruption() {
        let net = DenseNet::init(&[2, 2], 0).unwrap();
        let bytes = encode(&net, ModelKind::Expert, 0, Some(0), 0, 0).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}
