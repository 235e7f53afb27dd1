//! Volume files: `<stem>.vol` raw little-endian samples in (d, h, w) order
//! plus a `<stem>.json` sidecar describing them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Shape, Spacing, Triple, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    /// One byte per voxel; only 0/1 masks are written this way.
    U8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: Triple,
    pub spacing: Spacing,
    pub dtype: Dtype,
    pub kind: VolumeKind,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("vol"), stem.with_extension("json"))
}

/// Write a single-channel volume; masks are stored as bytes.
pub fn write_volume(stem: &Path, volume: &Volume, kind: VolumeKind) -> Result<()> {
    let s = volume.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::InvalidShape(format!("only single-channel volumes are stored, got {s:?}")));
    }
    let dtype = match kind {
        VolumeKind::Image => Dtype::F32,
        VolumeKind::Mask => Dtype::U8,
    };
    let bytes: Vec<u8> = match dtype {
        Dtype::F32 => volume.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::U8 => volume.data().iter().map(|&v| (v != 0.0) as u8).collect(),
    };
    let sidecar = Sidecar {
        dims: volume.dims(),
        spacing: volume.spacing(),
        dtype,
        kind,
    };
    let (vol, json) = paths(stem);
    if let Some(dir) = vol.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(vol, bytes)?;
    fs::write(json, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn read_volume(stem: &Path) -> Result<(Volume, Sidecar)> {
    let (vol, json) = paths(stem);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json)?)?;
    let bytes = fs::read(&vol)?;
    let n: usize = sidecar.dims.iter().product();
    let width = match sidecar.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    if bytes.len() != n * width {
        return Err(Error::InvalidShape(format!(
            "{} holds {} bytes, sidecar dims {:?} need {}",
            vol.display(),
            bytes.len(),
            sidecar.dims,
            n * width
        )));
    }
    let data = match sidecar.dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    let volume = Volume::from_vec(Shape::spatial(sidecar.dims), data)?.with_spacing(sidecar.spacing);
    Ok((volume, sidecar))
}
