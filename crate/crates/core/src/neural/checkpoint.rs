//! Binary checkpoint format: a versioned header, a JSON manifest describing
//! the experiment input, the layer stack and every tensor's shape, followed
//! by the raw little-endian f64 payload of each tensor in manifest order.
//!
//! Saved tensors cover trainable parameters plus batchnorm running
//! statistics, so a reloaded network predicts identically. Serialization is
//! fully deterministic: two identical networks produce identical bytes.

use super::network::{FeatureShape, LayerSpec, Network};
use super::NeuralError;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CBKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input geometry the checkpointed model was trained for. `kind` is the
/// dataset input kind name ("img", "img_plus_mask", "mask"); the channel
/// count is stored explicitly so the network can be rebuilt without knowing
/// the kind semantics.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointInput {
    pub kind: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub input: CheckpointInput,
    pub network: Vec<LayerSpec>,
    pub domain_head: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    input: &CheckpointInput,
) -> Result<(), NeuralError> {
    let state = net.state_tensors();
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        input: input.clone(),
        network: net.layer_specs(),
        domain_head: net.has_domain_head(),
        tensors: state
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| NeuralError::Checkpoint(format!("manifest encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for (_, tensor) in &state {
        for &v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointManifest), NeuralError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 12 {
        return Err(NeuralError::Checkpoint("file too short for header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let manifest_end = 20 + manifest_len;
    if bytes.len() < manifest_end {
        return Err(NeuralError::Checkpoint("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[20..manifest_end])
        .map_err(|e| NeuralError::Checkpoint(format!("manifest decode: {e}")))?;

    let input_shape = FeatureShape::Spatial {
        channels: manifest.input.channels,
        height: manifest.input.height,
        width: manifest.input.width,
    };
    let mut net = Network::build(&manifest.network, input_shape, 0)?;
    if manifest.domain_head {
        net = net.with_domain_head(0)?;
    }

    let mut offset = manifest_end;
    {
        let mut state = net.state_tensors_mut();
        if state.len() != manifest.tensors.len() {
            return Err(NeuralError::Checkpoint(format!(
                "manifest lists {} tensors, network has {}",
                manifest.tensors.len(),
                state.len()
            )));
        }
        for ((name, tensor), entry) in state.iter_mut().zip(&manifest.tensors) {
            if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(NeuralError::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, manifest has {} {:?}",
                    name,
                    tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let count = tensor.len();
            let end = offset + count * 8;
            if bytes.len() < end {
                return Err(NeuralError::Checkpoint(format!(
                    "truncated payload while reading {name}"
                )));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            **tensor = crate::tensor::Tensor::new(&entry.shape, data)?;
            offset = end;
        }
    }
    if offset != bytes.len() {
        return Err(NeuralError::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok((net, manifest))
}
