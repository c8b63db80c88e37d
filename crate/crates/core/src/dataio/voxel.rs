use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::mesh::{cross, dot, sub, TriangleMesh, Vec3};
use crate::error::{invalid, Result};

pub const DEFAULT_RESOLUTION: usize = 30;

/// Occupancy grid over the cube [-1, 1]^3, stored `[x][y][z]` with z fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub occupancy: Vec<f32>,
    pub label: Option<usize>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Self {
        VoxelGrid {
            resolution,
            occupancy: vec![0.0; resolution.pow(3)],
            label: None,
        }
    }

    pub fn new(resolution: usize, occupancy: Vec<f32>, label: Option<usize>) -> Result<Self> {
        if occupancy.len() != resolution.pow(3) {
            return Err(invalid!(
                "voxel grid of resolution {resolution} needs {} values, got {}",
                resolution.pow(3),
                occupancy.len()
            ));
        }
        if let Some(v) = occupancy.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("occupancy value {v} outside [0, 1]"));
        }
        Ok(VoxelGrid {
            resolution,
            occupancy,
            label,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.resolution + y) * self.resolution + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.occupancy[self.index(x, y, z)]
    }

    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.occupied() as f64 / self.occupancy.len() as f64
    }
}

fn project(tri: &[Vec3; 3], axis: Vec3) -> (f64, f64) {
    let p = [dot(tri[0], axis), dot(tri[1], axis), dot(tri[2], axis)];
    (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]))
}

/// Separating-axis test between a triangle and an axis-aligned box.
/// Touching counts as overlap.
pub fn triangle_box_overlap(center: Vec3, half: Vec3, tri: &[Vec3; 3]) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];
    let unit = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    // Box face normals.
    for a in 0..3 {
        let (lo, hi) = project(&v, unit[a]);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }
    // Triangle normal.
    let n = cross(edges[0], edges[1]);
    let r = half[0] * n[0].abs() + half[1] * n[1].abs() + half[2] * n[2].abs();
    let d = dot(n, v[0]);
    if d > r || d < -r {
        return false;
    }
    // Edge cross products.
    for e in &edges {
        for u in &unit {
            let axis = cross(*u, *e);
            if axis == [0.0; 3] {
                continue;
            }
            let (lo, hi) = project(&v, axis);
            let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}

/// Solid occupancy of a normalized mesh. Cells touched by a triangle are set;
/// for watertight meshes the enclosed cells are filled as well.
pub fn voxelize(mesh: &TriangleMesh, resolution: usize) -> Result<VoxelGrid> {
    if resolution < 2 {
        return Err(invalid!("voxel resolution must be at least 2, got {resolution}"));
    }
    let d = resolution;
    let h = 2.0 / d as f64;
    // Slight enlargement keeps faces lying exactly on cell boundaries robust.
    let half = 0.5 * h * (1.0 + 1e-9);
    let mut grid = VoxelGrid::empty(d);
    grid.label = mesh.label;
    let cell = |c: f64| (((c + 1.0) / h).floor().max(0.0) as usize).min(d - 1);

    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut outside = false;
        for a in 0..3 {
            let mn = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
            let mx = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
            outside |= mx < -1.0 - half || mn > 1.0 + half;
            lo[a] = cell(mn - 1e-9 * h);
            hi[a] = cell(mx + 1e-9 * h);
        }
        if outside {
            continue;
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let i = grid.index(x, y, z);
                    if grid.occupancy[i] > 0.0 {
                        continue;
                    }
                    let c = [
                        -1.0 + (x as f64 + 0.5) * h,
                        -1.0 + (y as f64 + 0.5) * h,
                        -1.0 + (z as f64 + 0.5) * h,
                    ];
                    if triangle_box_overlap(c, [half; 3], &tri) {
                        grid.occupancy[i] = 1.0;
                    }
                }
            }
        }
    }

    if mesh.is_watertight() {
        fill_interior(&mut grid);
    } else {
        log::warn!(
            "mesh '{}' is not watertight; using surface-only occupancy",
            mesh.id
        );
    }
    Ok(grid)
}

/// Marks every empty cell that is not 6-connected to the outside as filled.
fn fill_interior(grid: &mut VoxelGrid) {
    let d = grid.resolution;
    let mut outside = vec![false; grid.occupancy.len()];
    let mut queue = VecDeque::new();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                let border = x == 0 || y == 0 || z == 0 || x == d - 1 || y == d - 1 || z == d - 1;
                let i = grid.index(x, y, z);
                if border && grid.occupancy[i] == 0.0 {
                    outside[i] = true;
                    queue.push_back((x, y, z));
                }
            }
        }
    }
    while let Some((x, y, z)) = queue.pop_front() {
        let steps: [(isize, isize, isize); 6] =
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        for (dx, dy, dz) in steps {
            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if [nx, ny, nz].iter().any(|&c| c < 0 || c >= d as isize) {
                continue;
            }
            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
            let i = grid.index(nx, ny, nz);
            if !outside[i] && grid.occupancy[i] == 0.0 {
                outside[i] = true;
                queue.push_back((nx, ny, nz));
            }
        }
    }
    for (v, out) in grid.occupancy.iter_mut().zip(outside) {
        if !out {
            *v = 1.0;
        }
    }
}
