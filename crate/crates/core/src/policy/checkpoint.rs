//! Checkpoint files: one JSON header line followed by the raw little-endian
//! `f64` parameter payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Head, ModelConfig, Network};
use super::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"TRACEFIX-CKPT\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Policy,
    Reward,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegistryEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    vocab_size: usize,
    context_window: usize,
    head: Head,
    config: ModelConfig,
    registry: Vec<RegistryEntry>,
    parameter_count: usize,
}

fn registry_of(net: &Network) -> Vec<RegistryEntry> {
    net.registry()
        .iter()
        .map(|s| RegistryEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect()
}

pub fn encode_checkpoint(net: &Network, kind: CheckpointKind) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        vocab_size: VOCAB_SIZE,
        context_window: net.config().context_window,
        head: net.head(),
        config: net.config().clone(),
        registry: registry_of(net),
        parameter_count: net.parameter_count(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header)?);
    out.push(b'\n');
    out.reserve(net.parameter_count() * 8);
    for p in net.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, net: &Network, kind: CheckpointKind) -> Result<()> {
    fs::write(path, encode_checkpoint(net, kind)?)?;
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8], kind: CheckpointKind) -> Result<Network> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint("missing checkpoint magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    if header.vocab_size != VOCAB_SIZE || header.context_window != header.config.context_window {
        return Err(Error::Checkpoint("vocabulary or context window mismatch".into()));
    }
    let mut net = Network::new(header.config.clone(), header.head, 0)?;
    if registry_of(&net) != header.registry || header.parameter_count != net.parameter_count() {
        return Err(Error::Checkpoint(
            "shape registry does not match the model configuration".into(),
        ));
    }
    let payload = &rest[nl + 1..];
    if payload.len() != header.parameter_count * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            header.parameter_count * 8
        )));
    }
    for (dst, chunk) in net.parameters_mut().iter_mut().zip(payload.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path, kind: CheckpointKind) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?, kind)
}

/// Loads parameters into an existing network, rejecting any registry
/// difference.
pub fn load_checkpoint_into(path: &Path, kind: CheckpointKind, net: &mut Network) -> Result<()> {
    let loaded = load_checkpoint(path, kind)?;
    if registry_of(&loaded) != registry_of(net) || loaded.head() != net.head() {
        return Err(Error::Checkpoint(
            "checkpoint registry does not match the target model".into(),
        ));
    }
    net.set_parameters(loaded.parameters())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            window: 2,
            hidden1: 4,
            hidden2: 5,
            context_window: 16,
            adapter: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::new(small(), Head::Vocab, 3).unwrap();
        let bytes = encode_checkpoint(&net, CheckpointKind::Policy).unwrap();
        let back = decode_checkpoint(&bytes, CheckpointKind::Policy).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn wrong_kind_and_registry_are_rejected() {
        let net = Network::new(small(), Head::Scalar, 3).unwrap();
        let bytes = encode_checkpoint(&net, CheckpointKind::Reward).unwrap();
        assert!(decode_checkpoint(&bytes, CheckpointKind::Policy).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        let mut other = Network::new(ModelConfig { hidden1: 6, ..small() }, Head::Scalar, 1).unwrap();
        assert!(load_checkpoint_into(&path, CheckpointKind::Reward, &mut other).is_err());

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(decode_checkpoint(&truncated, CheckpointKind::Reward).is_err());
    }
}
