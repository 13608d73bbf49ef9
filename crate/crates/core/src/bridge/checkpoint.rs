//! Denoiser checkpoints: a little-endian `f32` parameter blob (`.bin`) next to
//! a JSON header (`.json`) with the architecture, hyperparameters and window.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cnn::{CnnConfig, TinyDenoiser};
use super::denoiser::TrainableDenoiser;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::volume_io::{decode_f32, encode_f32};

pub const FORMAT: &str = "cacmotion-denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: CnnConfig,
    pub n_params: usize,
    pub step: u64,
    pub hyperparameters: TrainConfig,
    /// Training window `(H, W, k)`.
    pub window: [usize; 3],
}

pub fn header_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn save(
    blob: &Path,
    net: &TinyDenoiser,
    step: u64,
    train: &TrainConfig,
    window: [usize; 3],
) -> Result<()> {
    if let Some(parent) = blob.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: 1,
        architecture: net.config().clone(),
        n_params: net.params().len(),
        step,
        hyperparameters: train.clone(),
        window,
    };
    fs::write(blob, encode_f32(net.params())).map_err(|e| Error::io(blob, e))?;
    let hp = header_path(blob);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, text + "\n").map_err(|e| Error::io(&hp, e))
}

pub fn load(blob: &Path) -> Result<(TinyDenoiser, CheckpointHeader)> {
    let hp = header_path(blob);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&hp, e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::format(
            &hp,
            format!("unexpected format {:?}", header.format),
        ));
    }
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    if bytes.len() != header.n_params * 4 {
        return Err(Error::format(
            blob,
            format!(
                "blob has {} bytes, header promises {} parameters",
                bytes.len(),
                header.n_params
            ),
        ));
    }
    let net = TinyDenoiser::from_params(header.architecture.clone(), decode_f32(&bytes))
        .map_err(|e| Error::format(blob, e.to_string()))?;
    Ok((net, header))
}
