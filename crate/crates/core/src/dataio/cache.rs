//! On-disk cache of preprocessed shapes: one little-endian binary32 file per
//! shape per representation plus a JSON index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::Split;
use super::points::PointCloud;
use super::voxel::VoxelGrid;
use crate::error::{invalid, Error, Result};

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(invalid!("{} is not a whole number of binary32 values", path.display()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelSidecar {
    pub id: String,
    pub resolution: usize,
    pub label: Option<usize>,
    pub layout: String,
}

/// Writes `<stem>.bin` (D^3 binary32) and `<stem>.json`.
pub fn write_voxels(dir: &Path, stem: &str, grid: &VoxelGrid) -> Result<()> {
    write_f32(&dir.join(format!("{stem}.bin")), grid.occupancy.iter().copied())?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &VoxelSidecar {
            id: stem.to_string(),
            resolution: grid.resolution,
            label: grid.label,
            layout: "xyz".into(),
        },
    )
}

pub fn read_voxels(dir: &Path, stem: &str) -> Result<VoxelGrid> {
    let side: VoxelSidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let values = read_f32(&dir.join(format!("{stem}.bin")))?;
    VoxelGrid::new(side.resolution, values, side.label)
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_f32(path, cloud.points.iter().flat_map(|p| p.iter().copied()))
}

pub fn read_points(path: &Path, label: Option<usize>) -> Result<PointCloud> {
    let values = read_f32(path)?;
    if values.len() % 3 != 0 {
        return Err(invalid!("{} does not hold N x 3 values", path.display()));
    }
    PointCloud::new(
        values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        label,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub class: String,
    pub label: usize,
    pub split: Split,
    /// Paths relative to the index file; absent when not cached.
    pub voxels: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub views: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub voxel_resolution: usize,
    pub point_count: usize,
    pub view_count: usize,
    pub view_size: usize,
    pub entries: Vec<IndexEntry>,
}
