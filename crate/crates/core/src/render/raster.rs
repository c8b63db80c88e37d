use serde::{Deserialize, Serialize};

use super::camera::Camera;
use crate::dataio::TriangleMesh;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Silhouette,
    Depth,
}

/// Closest depth of interest in front of the camera; triangles reaching
/// behind it are dropped rather than clipped.
const NEAR_EPS: f64 = 1e-6;

/// Screen positions are snapped to 1/256 pixel so edge functions evaluate
/// exactly and shared edges get consistent signs.
const SUBPIXEL: f64 = 256.0;

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top and left edges own the pixels lying exactly on them, so a pixel on an
/// edge shared by two triangles is drawn once. Screen y grows downward and
/// the triangle is oriented so interior edge values are positive.
fn owns_boundary(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// Row-major `height x width` image of one view. Depth pixels hold
/// `(far - z) / (far - near)` of the nearest surface with `near`/`far`
/// bracketing the unit sphere; background is 0.
pub fn rasterize(mesh: &TriangleMesh, camera: &Camera, mode: RenderMode) -> Result<Vec<f32>> {
    let frame = camera.frame()?;
    let (w, h) = (camera.width, camera.height);
    let aspect = w as f64 / h as f64;
    let dist = camera.distance();
    let (near, far) = ((dist - 1.0).max(NEAR_EPS), dist + 1.0);
    let mut zbuf = vec![f64::INFINITY; w * h];

    let project = |p: [f64; 3]| -> Option<([f64; 2], f64)> {
        let c = frame.to_camera(p);
        if c[2] <= NEAR_EPS {
            return None;
        }
        let nx = c[0] / (c[2] * frame.tan_half * aspect);
        let ny = c[1] / (c[2] * frame.tan_half);
        let snap = |v: f64| (v * SUBPIXEL).round() / SUBPIXEL;
        Some(([snap((nx + 1.0) * 0.5 * w as f64), snap((1.0 - ny) * 0.5 * h as f64)], c[2]))
    };

    for f in 0..mesh.faces.len() {
        let tri = mesh.triangle(f);
        let (Some(p0), Some(p1), Some(p2)) = (project(tri[0]), project(tri[1]), project(tri[2]))
        else {
            continue;
        };
        let (mut s, mut z) = ([p0.0, p1.0, p2.0], [p0.1, p1.1, p2.1]);
        let mut area = edge(s[0], s[1], s[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            s.swap(1, 2);
            z.swap(1, 2);
            area = -area;
        }
        let xmin = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let xmax = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let ymax = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let c0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let c1 = ((xmax - 0.5).floor()).min(w as f64 - 1.0);
        let r0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let r1 = ((ymax - 0.5).floor()).min(h as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let (c1, r1) = (c1 as usize, r1 as usize);
        let owns = [
            owns_boundary(s[1], s[2]),
            owns_boundary(s[2], s[0]),
            owns_boundary(s[0], s[1]),
        ];
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                let e = [edge(s[1], s[2], p), edge(s[2], s[0], p), edge(s[0], s[1], p)];
                if (0..3).any(|k| e[k] < 0.0 || (e[k] == 0.0 && !owns[k])) {
                    continue;
                }
                // Perspective-correct depth: 1/z is affine in screen space.
                let inv_z = (e[0] / z[0] + e[1] / z[1] + e[2] / z[2]) / area;
                let depth = 1.0 / inv_z;
                let i = r * w + c;
                if depth < zbuf[i] {
                    zbuf[i] = depth;
                }
            }
        }
    }

    Ok(zbuf
        .into_iter()
        .map(|z| {
            if z.is_infinite() {
                0.0
            } else {
                match mode {
                    RenderMode::Silhouette => 1.0,
                    RenderMode::Depth => ((far - z) / (far - near)).clamp(0.0, 1.0) as f32,
                }
            }
        })
        .collect())
}
