//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON container holding the architecture, the input
//! flattening-order tag, and the flat parameter vector. Floats are written
//! in shortest round-trip form, so save/load reproduces parameters exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParams, NetworkConfig};

const FORMAT: &str = "emg-intent-checkpoint";
const VERSION: u32 = 1;

/// Input layout tag; checkpoints with a different tag are rejected rather
/// than silently misinterpreted.
pub const FLATTEN_ORDER: &str = "input:channel-major;params:w1,b1,w2,b2,w3,b3;weights:row-major";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    flatten_order: String,
    config: NetworkConfig,
    params: Vec<f64>,
}

/// Serialize a checkpoint to bytes (JSON).
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        version: VERSION,
        flatten_order: FLATTEN_ORDER.to_string(),
        config: params.config(),
        params: params.flatten().to_vec(),
    };
    Ok(serde_json::to_vec(&file)?)
}

/// Deserialize a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let file: CheckpointFile = serde_json::from_slice(bytes)?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag `{}`", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    if file.flatten_order != FLATTEN_ORDER {
        return Err(Error::Checkpoint(format!("incompatible flatten order `{}`", file.flatten_order)));
    }
    ModelParams::from_flat(&file.config, file.params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, LayerDims};

    #[test]
    fn round_trip_is_exact() {
        let cfg = NetworkConfig {
            dims: LayerDims { input: 12, hidden1: 7, hidden2: 5, output: 3 },
            activation: Activation::Tanh,
        };
        let params = init_params(&cfg, 97);
        let bytes = to_bytes(&params).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn rejects_foreign_containers() {
        assert!(from_bytes(b"{\"format\":\"something-else\"}").is_err());
        let cfg = NetworkConfig {
            dims: LayerDims { input: 4, hidden1: 3, hidden2: 2, output: 3 },
            activation: Activation::Relu,
        };
        let params = init_params(&cfg, 1);
        let text = String::from_utf8(to_bytes(&params).unwrap()).unwrap();
        let tampered = text.replace(FLATTEN_ORDER, "input:time-major");
        assert!(matches!(from_bytes(tampered.as_bytes()), Err(Error::Checkpoint(_))));
    }
}
