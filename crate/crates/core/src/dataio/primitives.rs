use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::{TriangleMesh, Vec3};
use crate::error::{invalid, Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Box,
    Sphere,
    Cylinder,
    Cone,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Box,
        Primitive::Sphere,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Box => "box",
            Primitive::Sphere => "sphere",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid!("unknown primitive '{s}'"))
    }
}

const WELD_TOLERANCE: f64 = 1e-9;

fn ring(n: usize, radius: f64, z: f64) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            [radius * t.cos(), radius * t.sin(), z]
        })
        .collect()
}

/// Connects a lower ring starting at `a0` to the ring above it at `b0`.
fn stitch(faces: &mut Vec<[usize; 3]>, a0: usize, b0: usize, n: usize) {
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push([a0 + i, a0 + j, b0 + j]);
        faces.push([a0 + i, b0 + j, b0 + i]);
    }
}

/// Fans ring vertices around a hub. `outward_up` picks the winding.
fn cap(faces: &mut Vec<[usize; 3]>, hub: usize, r0: usize, n: usize, outward_up: bool) {
    for i in 0..n {
        let j = (i + 1) % n;
        if outward_up {
            faces.push([hub, r0 + i, r0 + j]);
        } else {
            faces.push([hub, r0 + j, r0 + i]);
        }
    }
}

/// Unit sphere with single pole vertices and `lat` latitude bands.
pub fn uv_sphere(lat: usize, lon: usize) -> TriangleMesh {
    let mut vertices = vec![[0.0, 0.0, 1.0]];
    for k in 1..lat {
        let theta = PI * k as f64 / lat as f64;
        vertices.extend(ring(lon, theta.sin(), theta.cos()));
    }
    vertices.push([0.0, 0.0, -1.0]);
    let south = vertices.len() - 1;
    let mut faces = Vec::new();
    cap(&mut faces, 0, 1, lon, true);
    for k in 0..lat.saturating_sub(2) {
        stitch(&mut faces, 1 + (k + 1) * lon, 1 + k * lon, lon);
    }
    cap(&mut faces, south, 1 + (lat - 2) * lon, lon, false);
    TriangleMesh::new("sphere", vertices, faces).expect("valid sphere indices")
}

fn cylinder(segments: usize) -> TriangleMesh {
    let mut vertices = ring(segments, 1.0, -1.0);
    vertices.extend(ring(segments, 1.0, 1.0));
    vertices.push([0.0, 0.0, -1.0]);
    vertices.push([0.0, 0.0, 1.0]);
    let mut faces = Vec::new();
    stitch(&mut faces, 0, segments, segments);
    cap(&mut faces, 2 * segments, 0, segments, false);
    cap(&mut faces, 2 * segments + 1, segments, segments, true);
    TriangleMesh::new("cylinder", vertices, faces).expect("valid cylinder indices")
}

fn cone(segments: usize) -> TriangleMesh {
    let mut vertices = ring(segments, 1.0, -1.0);
    vertices.push([0.0, 0.0, -1.0]);
    vertices.push([0.0, 0.0, 1.0]);
    let mut faces = Vec::new();
    cap(&mut faces, segments, 0, segments, false);
    cap(&mut faces, segments + 1, 0, segments, true);
    TriangleMesh::new("cone", vertices, faces).expect("valid cone indices")
}

fn torus(major: usize, minor: usize) -> TriangleMesh {
    let (big, small) = (0.7, 0.3);
    let mut vertices = Vec::with_capacity(major * minor);
    for i in 0..major {
        let u = 2.0 * PI * i as f64 / major as f64;
        for j in 0..minor {
            let v = 2.0 * PI * j as f64 / minor as f64;
            let r = big + small * v.cos();
            vertices.push([r * u.cos(), r * u.sin(), small * v.sin()]);
        }
    }
    let mut faces = Vec::new();
    for i in 0..major {
        let i2 = (i + 1) % major;
        for j in 0..minor {
            let j2 = (j + 1) % minor;
            let (a, b, c, d) = (i * minor + j, i2 * minor + j, i2 * minor + j2, i * minor + j2);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriangleMesh::new("torus", vertices, faces).expect("valid torus indices")
}

/// Cube [-1,1]^3 with each face split into an `n`x`n` grid.
fn boxed(n: usize) -> TriangleMesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let base = vertices.len();
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = sign;
                    p[u] = -1.0 + 2.0 * i as f64 / n as f64;
                    p[v] = -1.0 + 2.0 * j as f64 / n as f64;
                    vertices.push(p);
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let a = base + i * (n + 1) + j;
                    let (b, c, d) = (a + n + 1, a + n + 2, a + 1);
                    if sign > 0.0 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    TriangleMesh::new("box", vertices, faces)
        .expect("valid box indices")
        .weld(WELD_TOLERANCE)
}

fn class_seed(class: Primitive, seed: u64) -> u64 {
    let c = Primitive::ALL.iter().position(|&p| p == class).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (c + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Seeded closed primitive: random tessellation, per-axis scale in
/// [0.5, 1.0] (uniform for spheres so they stay round) and a random turn
/// about +z.
pub fn generate_primitive(class: Primitive, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed(class, seed));
    let mesh = match class {
        Primitive::Box => boxed(rng.gen_range(1..=4)),
        Primitive::Sphere => {
            let lat = rng.gen_range(12..=18);
            uv_sphere(lat, 2 * lat)
        }
        Primitive::Cylinder => cylinder(rng.gen_range(16..=32)),
        Primitive::Cone => cone(rng.gen_range(16..=32)),
        Primitive::Torus => torus(rng.gen_range(20..=32), rng.gen_range(10..=16)),
    };
    let scale = if class == Primitive::Sphere {
        [rng.gen_range(0.5..=1.0); 3]
    } else {
        [
            rng.gen_range(0.5..=1.0),
            rng.gen_range(0.5..=1.0),
            rng.gen_range(0.5..=1.0),
        ]
    };
    let angle: f64 = rng.gen_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    let vertices = mesh
        .vertices
        .iter()
        .map(|p| {
            let (x, y, z) = (p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]);
            [c * x - s * y, s * x + c * y, z]
        })
        .collect();
    TriangleMesh {
        id: format!("{class}_{seed:04}"),
        label: Some(Primitive::ALL.iter().position(|&p| p == class).unwrap_or(0)),
        vertices,
        faces: mesh.faces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::mesh::{cross, dot, normalize_shape, norm, sub};

    #[test]
    fn primitives_are_closed_and_deterministic() {
        for p in Primitive::ALL {
            for seed in 0..3 {
                let m = generate_primitive(p, seed);
                assert!(m.is_watertight(), "{p} seed {seed}");
                assert_eq!(m, generate_primitive(p, seed));
            }
        }
    }

    #[test]
    fn sphere_vertices_sit_on_unit_norm() {
        for seed in 0..5 {
            let m = normalize_shape(&generate_primitive(Primitive::Sphere, seed)).unwrap();
            for v in &m.vertices {
                assert!((norm(*v) - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn faces_wind_outward() {
        // Signed volume of a closed outward-wound mesh is positive.
        for p in Primitive::ALL {
            let m = generate_primitive(p, 7);
            let vol: f64 = (0..m.faces.len())
                .map(|f| {
                    let [a, b, c] = m.triangle(f);
                    dot(a, cross(sub(b, a), sub(c, a))) / 6.0
                })
                .sum();
            assert!(vol > 0.0, "{p}: {vol}");
        }
    }

    #[test]
    fn names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
        assert!("pyramid".parse::<Primitive>().is_err());
    }
}
