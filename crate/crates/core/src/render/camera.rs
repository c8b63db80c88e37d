use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataio::{cross, dot, scale, sub, Vec3};
use crate::error::{invalid, Result};

pub const RING_DISTANCE: f64 = 2.5;
pub const CANVAS_MARGIN: f64 = 0.05;
pub const DEFAULT_ELEVATION_DEG: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame: `right`, `up`, `forward`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Frame {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub tan_half: f64,
}

impl Camera {
    pub(crate) fn frame(&self) -> Result<Frame> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid!("camera image size must be positive"));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(invalid!("camera field of view {} outside (0, pi)", self.fov));
        }
        let view = sub(self.target, self.position);
        let len = dot(view, view).sqrt();
        if !(len > 1e-12) {
            return Err(invalid!("camera position coincides with its target"));
        }
        let forward = [view[0] / len, view[1] / len, view[2] / len];
        let side = cross(forward, self.up);
        if dot(side, side).sqrt() < 1e-9 * dot(self.up, self.up).sqrt().max(1e-300) {
            return Err(invalid!("camera up vector is parallel to the view direction"));
        }
        let right = scale(side, 1.0 / dot(side, side).sqrt());
        let up = cross(right, forward);
        Ok(Frame {
            origin: self.position,
            right,
            up,
            forward,
            tan_half: (self.fov / 2.0).tan(),
        })
    }

    pub fn distance(&self) -> f64 {
        let v = sub(self.target, self.position);
        dot(v, v).sqrt()
    }
}

impl Frame {
    /// Camera-space coordinates `(x right, y up, z forward)`.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.origin);
        [dot(d, self.right), dot(d, self.up), dot(d, self.forward)]
    }
}

/// Vertical field of view at which a unit sphere at `distance` fills the
/// canvas with the given relative margin.
pub fn fitted_fov(distance: f64, margin: f64) -> f64 {
    let half = (1.0 / distance).asin();
    2.0 * ((1.0 + margin) * half.tan()).atan()
}

/// `n` cameras on a ring around the up (+z) axis, all aimed at the origin.
/// Camera `i` sits at azimuth `-2 pi i / n`, so turning the object by `k`
/// ring steps shows it to camera `i` the way camera `i + k` saw it before.
pub fn ring_cameras(n: usize, elevation_deg: f64, size: usize) -> Result<Vec<Camera>> {
    if n < 1 {
        return Err(invalid!("camera ring needs at least one camera"));
    }
    if size == 0 {
        return Err(invalid!("image size must be positive"));
    }
    let e = elevation_deg.to_radians();
    let fov = fitted_fov(RING_DISTANCE, CANVAS_MARGIN);
    Ok((0..n)
        .map(|i| {
            let az = -2.0 * PI * i as f64 / n as f64;
            Camera {
                position: [
                    RING_DISTANCE * e.cos() * az.cos(),
                    RING_DISTANCE * e.cos() * az.sin(),
                    RING_DISTANCE * e.sin(),
                ],
                target: [0.0; 3],
                up: [0.0, 0.0, 1.0],
                fov,
                width: size,
                height: size,
            }
        })
        .collect())
}
