//! Model checkpoints.
//!
//! A checkpoint is a JSON object
//!
//! ```json
//! {"format": "mmsurv-checkpoint", "version": 1,
//!  "variant": "multimodal_text_image",
//!  "modalities": [{"modality": "saps", "in_dim": 15, "out_dim": 15, "dropout_rate": 0.5}, ...],
//!  "config": {"epochs": 250, ...},
//!  "params": {"head.b": {"shape": [1], "values": [0.0]}, ...},
//!  "checksum": "<sha256 hex>"}
//! ```
//!
//! `checksum` is the SHA-256 of the compact JSON serialization of the same
//! object without the `checksum` key, with keys in the order shown and
//! parameters sorted by name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::TensorMap;
use crate::error::{Error, Result};
use crate::fusion::{BranchSpec, FusionNetwork, ModalitySet, ModelVariant, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "mmsurv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Payload {
    format: String,
    version: u32,
    variant: Option<ModelVariant>,
    modalities: Vec<BranchSpec>,
    config: TrainConfig,
    params: TensorMap,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    #[serde(flatten)]
    payload: Payload,
    checksum: String,
}

fn digest(payload: &Payload) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(payload)?)))
}

pub fn save_checkpoint(net: &FusionNetwork, variant: Option<ModelVariant>, path: &Path) -> Result<()> {
    let payload = Payload {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        variant,
        modalities: net.modalities().branches().to_vec(),
        config: net.config().clone(),
        params: net.params().clone(),
    };
    let checksum = digest(&payload)?;
    let text = serde_json::to_string(&Stored { payload, checksum })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionNetwork, Option<ModelVariant>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: Stored = serde_json::from_str(&text)?;
    let p = &stored.payload;
    if p.format != CHECKPOINT_FORMAT || p.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!("unsupported checkpoint {} v{}", p.format, p.version)));
    }
    let found = digest(p)?;
    if found != stored.checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: stored.checksum,
            found,
        });
    }
    let Stored { payload, .. } = stored;
    let modalities = ModalitySet::new(payload.modalities)?;
    let net = FusionNetwork::from_parts(modalities, payload.config, payload.params)?;
    Ok((net, payload.variant))
}
