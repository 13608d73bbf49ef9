//! Raw volume container: little-endian payload plus a JSON sidecar with the
//! same stem (`case.raw` + `case.json`).
//!
//! Volumes and sinograms are stored as `f32`; masks as one byte (0/1) per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Dims, Spacing, VoxelGrid};

pub const ORDER: &str = "xyz-row-major";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "normalized")]
    Normalized,
    #[serde(rename = "line-integral")]
    LineIntegral,
    #[serde(rename = "mask")]
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub order: String,
    pub unit: Unit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles_deg: Option<Vec<f64>>,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_sidecar(raw: &Path, sc: &Sidecar) -> Result<()> {
    let p = sidecar_path(raw);
    let text = serde_json::to_string_pretty(sc).expect("sidecar serializes");
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_sidecar(raw: &Path) -> Result<Sidecar> {
    let p = sidecar_path(raw);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
    if sc.order != ORDER {
        return Err(Error::format(
            &p,
            format!("unsupported order {:?}", sc.order),
        ));
    }
    Ok(sc)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

pub fn write_volume(raw: &Path, v: &VoxelGrid, unit: Unit) -> Result<()> {
    write_values(raw, v.dims(), v.spacing(), v.values(), unit, None)
}

/// Writes an arbitrary `f32` payload with its sidecar.
pub fn write_values(
    raw: &Path,
    dims: Dims,
    spacing: Spacing,
    values: &[f64],
    unit: Unit,
    angles_deg: Option<Vec<f64>>,
) -> Result<()> {
    ensure_parent(raw)?;
    fs::write(raw, encode_f32(values)).map_err(|e| Error::io(raw, e))?;
    write_sidecar(
        raw,
        &Sidecar {
            dims,
            spacing_mm: spacing,
            order: ORDER.into(),
            unit,
            angles_deg,
        },
    )
}

pub fn read_volume(raw: &Path) -> Result<(VoxelGrid, Unit)> {
    let sc = read_sidecar(raw)?;
    if sc.unit == Unit::Mask {
        return Err(Error::format(raw, "file holds a mask, not a volume"));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let n = sc.dims.iter().product::<usize>();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            raw,
            format!("payload has {} bytes, expected {}", bytes.len(), n * 4),
        ));
    }
    let v = VoxelGrid::new(sc.dims, sc.spacing_mm, decode_f32(&bytes))
        .map_err(|e| Error::format(raw, e.to_string()))?;
    Ok((v, sc.unit))
}

pub fn write_mask(raw: &Path, m: &BinaryMask, spacing: Spacing) -> Result<()> {
    ensure_parent(raw)?;
    let bytes: Vec<u8> = m.bits().iter().map(|&b| u8::from(b)).collect();
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    write_sidecar(
        raw,
        &Sidecar {
            dims: m.dims(),
            spacing_mm: spacing,
            order: ORDER.into(),
            unit: Unit::Mask,
            angles_deg: None,
        },
    )
}

pub fn read_mask(raw: &Path) -> Result<(BinaryMask, Spacing)> {
    let sc = read_sidecar(raw)?;
    if sc.unit != Unit::Mask {
        return Err(Error::format(raw, "file is not a mask"));
    }
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    if bytes.len() != sc.dims.iter().product::<usize>() {
        return Err(Error::format(
            raw,
            "mask payload length does not match dims",
        ));
    }
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::format(raw, format!("mask byte {b} is not 0/1")));
    }
    let m = BinaryMask::new(sc.dims, bytes.iter().map(|&b| b == 1).collect())
        .map_err(|e| Error::format(raw, e.to_string()))?;
    Ok((m, sc.spacing_mm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = VoxelGrid::new(
            [3, 2, 1],
            [0.5, 0.5, 3.0],
            vec![-1000.0, 40.0, 130.5, 800.0, 0.25, -3.0],
        )
        .unwrap();
        let p = dir.path().join("sub/vol.raw");
        write_volume(&p, &v, Unit::Hu).unwrap();
        let (back, unit) = read_volume(&p).unwrap();
        assert_eq!(unit, Unit::Hu);
        assert_eq!(back, v);

        let m = BinaryMask::new([3, 2, 1], vec![true, false, false, true, true, false]).unwrap();
        let mp = dir.path().join("mask.raw");
        write_mask(&mp, &m, v.spacing()).unwrap();
        let (mb, sp) = read_mask(&mp).unwrap();
        assert_eq!(mb, m);
        assert_eq!(sp, v.spacing());
        assert!(read_volume(&mp).is_err());
        assert!(read_mask(&p).is_err());

        let sc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(sc["order"], "xyz-row-major");
        assert_eq!(sc["unit"], "HU");
        assert_eq!(sc["dims"], serde_json::json!([3, 2, 1]));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = VoxelGrid::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let p = dir.path().join("v.raw");
        write_volume(&p, &v, Unit::Hu).unwrap();
        fs::write(&p, [0u8; 7]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
    }
}
