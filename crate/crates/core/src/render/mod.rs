//! Camera rings, a software rasterizer for silhouette and depth views, and
//! the differentiable line-integral renderer for voxel grids.

mod camera;
mod line_integral;
mod raster;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use camera::{
    fitted_fov, ring_cameras, Camera, CANVAS_MARGIN, DEFAULT_ELEVATION_DEG, RING_DISTANCE,
};
pub use line_integral::{check_occupancy, line_integral_render, line_integral_views, AXIS_VIEWS};
pub use raster::{rasterize, RenderMode};

use crate::dataio::cache::{read_f32, read_json, write_f32, write_json};
use crate::dataio::TriangleMesh;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_VIEWS: usize = 12;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// `V` images of `height x width`, row-major, one per camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub mode: RenderMode,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub cameras: Vec<Camera>,
}

impl ViewSet {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn image(&self, v: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.images[v * n..(v + 1) * n]
    }
}

pub fn render_views(mesh: &TriangleMesh, cameras: &[Camera], mode: RenderMode) -> Result<ViewSet> {
    let first = cameras
        .first()
        .ok_or_else(|| invalid!("at least one camera is required"))?;
    let (height, width) = (first.height, first.width);
    let mut images = Vec::with_capacity(cameras.len() * height * width);
    for cam in cameras {
        if (cam.height, cam.width) != (height, width) {
            return Err(invalid!("all cameras of a view set must share one image size"));
        }
        images.extend(rasterize(mesh, cam, mode)?);
    }
    Ok(ViewSet {
        mode,
        height,
        width,
        images,
        cameras: cameras.to_vec(),
    })
}

/// Binary 8-bit PGM of a `[0, 1]` image.
pub fn write_pgm(path: &Path, image: &[f32], height: usize, width: usize) -> Result<()> {
    if image.len() != height * width {
        return Err(invalid!("image holds {} pixels, expected {height}x{width}", image.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSidecar {
    pub mode: RenderMode,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: Vec<Camera>,
}

/// Writes `<stem>.bin` (V x H x W binary32) and `<stem>.json`.
pub fn write_views(dir: &Path, stem: &str, views: &ViewSet) -> Result<()> {
    write_f32(&dir.join(format!("{stem}.bin")), views.images.iter().copied())?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &ViewSidecar {
            mode: views.mode,
            views: views.views(),
            height: views.height,
            width: views.width,
            cameras: views.cameras.clone(),
        },
    )
}

pub fn read_views(dir: &Path, stem: &str) -> Result<ViewSet> {
    let side: ViewSidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let images = read_f32(&dir.join(format!("{stem}.bin")))?;
    if images.len() != side.views * side.height * side.width || side.cameras.len() != side.views {
        return Err(invalid!("view cache '{stem}' does not match its sidecar"));
    }
    Ok(ViewSet {
        mode: side.mode,
        height: side.height,
        width: side.width,
        images,
        cameras: side.cameras,
    })
}
