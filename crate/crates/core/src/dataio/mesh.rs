use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// A shape as a collection of triangles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub id: String,
    pub label: Option<usize>,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(id: impl Into<String>, vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(invalid!("face {f:?} references a vertex beyond {n}"));
        }
        Ok(TriangleMesh {
            id: id.into(),
            label: None,
            vertices,
            faces,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut edges: HashMap<(usize, usize), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    /// Merges vertices closer than `tol` (per-axis grid snapping) and drops
    /// faces that collapse.
    pub fn weld(mut self, tol: f64) -> Self {
        let mut index: HashMap<[i64; 3], usize> = HashMap::new();
        let mut verts = Vec::new();
        let mut remap = Vec::with_capacity(self.vertices.len());
        for v in &self.vertices {
            let key = [
                (v[0] / tol).round() as i64,
                (v[1] / tol).round() as i64,
                (v[2] / tol).round() as i64,
            ];
            let id = *index.entry(key).or_insert_with(|| {
                verts.push(*v);
                verts.len() - 1
            });
            remap.push(id);
        }
        self.faces = self
            .faces
            .iter()
            .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
        self.vertices = verts;
        self
    }
}

/// Parses OFF text. Accepts both the split header (`OFF` on its own line)
/// and the fused variant where counts follow the keyword (`OFF490 518 0`).
/// Polygonal faces are fan-triangulated.
pub fn parse_off(text: &str, id: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let perr = |line: usize, message: String| Error::Parse { line, message };

    let (hline, header) = lines
        .next()
        .ok_or_else(|| perr(1, "missing OFF header".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| perr(hline, format!("expected OFF header, found '{header}'")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| perr(hline + 1, "missing counts line".into()))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| perr(cline, format!("bad counts '{counts}': {e}")))?;
    if counts.len() < 2 {
        return Err(perr(cline, "counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for k in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| perr(cline + k + 1, format!("expected {nv} vertices, found {k}")))?;
        let xyz: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(ln, format!("bad vertex '{l}': {e}")))?;
        if xyz.len() != 3 {
            return Err(perr(ln, format!("vertex needs 3 coordinates: '{l}'")));
        }
        vertices.push([xyz[0], xyz[1], xyz[2]]);
    }

    let mut faces = Vec::with_capacity(nf);
    for k in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| perr(cline + nv + k + 1, format!("expected {nf} faces, found {k}")))?;
        let ints: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(ln, format!("bad face '{l}': {e}")))?;
        let n = *ints.first().ok_or_else(|| perr(ln, "empty face".into()))?;
        if n < 3 || ints.len() < n + 1 {
            return Err(perr(ln, format!("face declares {n} vertices: '{l}'")));
        }
        let idx = &ints[1..=n];
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(perr(ln, format!("vertex index {bad} out of range for {nv} vertices")));
        }
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    TriangleMesh::new(id, vertices, faces)
}

pub fn load_off(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_off(&text, &id)
}

pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

/// Translates the vertex centroid to the origin and scales uniformly so the
/// largest vertex norm is 1. Faces with area below 1e-12 are dropped.
pub fn normalize_shape(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    if mesh.vertices.is_empty() || mesh.faces.is_empty() {
        return Err(invalid!("cannot normalize empty mesh '{}'", mesh.id));
    }
    let n = mesh.vertices.len() as f64;
    let centroid = scale(mesh.vertices.iter().fold([0.0; 3], |acc, &v| add(acc, v)), 1.0 / n);
    let centered: Vec<Vec3> = mesh.vertices.iter().map(|&v| sub(v, centroid)).collect();
    let max = centered.iter().map(|&v| norm(v)).fold(0.0, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return Err(invalid!("mesh '{}' has no spatial extent", mesh.id));
    }
    let mut out = mesh.clone();
    out.vertices = centered.into_iter().map(|v| scale(v, 1.0 / max)).collect();
    let kept: Vec<[usize; 3]> = (0..out.faces.len())
        .filter(|&f| out.face_area(f) > 1e-12)
        .map(|f| out.faces[f])
        .collect();
    if kept.len() < out.faces.len() {
        log::debug!("{}: dropped {} degenerate faces", mesh.id, out.faces.len() - kept.len());
    }
    out.faces = kept;
    Ok(out)
}
