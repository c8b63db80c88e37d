use serde::{Deserialize, Serialize};

use super::mesh::{TriangleMesh, Vec3};
use super::points::PointCloud;
use super::voxel::VoxelGrid;

/// Which model axis points up. Quarter-step rotations happen about it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpAxis {
    #[default]
    Z,
    Y,
}

pub const STEPS_PER_TURN: i64 = 12;

const HALF_SQRT3: f64 = 0.866_025_403_784_438_6;

/// Exact cosine and sine of `k * 30` degrees.
pub fn step_cos_sin(k: i64) -> (f64, f64) {
    const COS: [f64; 12] = [
        1.0, HALF_SQRT3, 0.5, 0.0, -0.5, -HALF_SQRT3, -1.0, -HALF_SQRT3, -0.5, 0.0, 0.5, HALF_SQRT3,
    ];
    let k = k.rem_euclid(STEPS_PER_TURN) as usize;
    (COS[k], COS[(k + 9) % 12])
}

fn turn(p: Vec3, k: i64, up: UpAxis) -> Vec3 {
    let (c, s) = step_cos_sin(k);
    match up {
        UpAxis::Z => [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]],
        UpAxis::Y => [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]],
    }
}

/// Rotation by `k` steps of 30 degrees about the up axis.
pub trait RotateUp: Sized {
    fn rotate_up(&self, k: i64, up: UpAxis) -> Self;
}

pub fn rotate_up_axis<S: RotateUp>(shape: &S, k: i64, up: UpAxis) -> S {
    shape.rotate_up(k, up)
}

impl RotateUp for TriangleMesh {
    fn rotate_up(&self, k: i64, up: UpAxis) -> Self {
        let mut out = self.clone();
        out.vertices = self.vertices.iter().map(|&p| turn(p, k, up)).collect();
        out
    }
}

impl RotateUp for PointCloud {
    fn rotate_up(&self, k: i64, up: UpAxis) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = turn([p[0] as f64, p[1] as f64, p[2] as f64], k, up);
                [q[0] as f32, q[1] as f32, q[2] as f32]
            })
            .collect();
        PointCloud {
            points,
            label: self.label,
        }
    }
}

impl RotateUp for VoxelGrid {
    /// Nearest-neighbour resampling at cell centers; cells whose source falls
    /// outside the grid become empty.
    fn rotate_up(&self, k: i64, up: UpAxis) -> Self {
        let d = self.resolution;
        let mid = d as f64 / 2.0;
        let mut out = VoxelGrid::empty(d);
        out.label = self.label;
        for x in 0..d {
            for y in 0..d {
                for z in 0..d {
                    let q = [x as f64 + 0.5 - mid, y as f64 + 0.5 - mid, z as f64 + 0.5 - mid];
                    let src = turn(q, -k, up);
                    let idx: Vec<f64> = src.iter().map(|&c| (c + mid - 0.5).round()).collect();
                    if idx.iter().all(|&i| i >= 0.0 && i < d as f64) {
                        let v = self.get(idx[0] as usize, idx[1] as usize, idx[2] as usize);
                        let o = out.index(x, y, z);
                        out.occupancy[o] = v;
                    }
                }
            }
        }
        out
    }
}
