use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{add, scale, TriangleMesh, Vec3};
use crate::error::{invalid, Result};

pub const DEFAULT_POINTS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("point cloud must not be empty"));
        }
        Ok(PointCloud { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, p| {
            add(acc, [p[0] as f64, p[1] as f64, p[2] as f64])
        });
        scale(s, 1.0 / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64))
            .fold(0.0, f64::max)
    }
}

/// Area-weighted uniform surface samples, with the face each came from.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<(usize, Vec3)>> {
    if count == 0 {
        return Err(invalid!("sample count must be positive"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(invalid!("mesh '{}' has zero surface area", mesh.id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.gen::<f64>() * total;
        let f = cumulative
            .partition_point(|&c| c <= pick)
            .min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let s = rng.gen::<f64>().sqrt();
        let t = rng.gen::<f64>();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - t), s * t);
        let p = [
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ];
        out.push((f, p));
    }
    Ok(out)
}

/// Uniform surface point cloud, re-centered on its centroid and scaled to
/// unit max norm.
pub fn sample_points(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<PointCloud> {
    let raw: Vec<Vec3> = sample_surface(mesh, count, seed)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let n = raw.len() as f64;
    let centroid = scale(raw.iter().fold([0.0; 3], |acc, &p| add(acc, p)), 1.0 / n);
    let centered: Vec<Vec3> = raw
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max = centered
        .iter()
        .map(|p| p[0].hypot(p[1]).hypot(p[2]))
        .fold(0.0, f64::max);
    let inv = if max > 0.0 { 1.0 / max } else { 1.0 };
    let points = centered
        .iter()
        .map(|p| {
            let q = [(p[0] * inv) as f32, (p[1] * inv) as f32, (p[2] * inv) as f32];
            // Rounding to binary32 may nudge a point just past unit norm.
            let r = (q[0] as f64).hypot(q[1] as f64).hypot(q[2] as f64);
            if r > 1.0 {
                let k = (1.0 / r) as f32;
                [q[0] * k, q[1] * k, q[2] * k]
            } else {
                q
            }
        })
        .collect();
    PointCloud::new(points, mesh.label)
}
