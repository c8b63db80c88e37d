use crate::dataio::{capped_indices, PointCloud, RotateUp, UpAxis, VoxelGrid, STEPS_PER_TURN};
use crate::error::{dim_err, invalid, Result};
use crate::render::{check_occupancy, ViewSet};
use crate::tensor::{Real, Tensor};

use super::InputKind;

/// One shape in the representation a model consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Voxels(VoxelGrid),
    Points(PointCloud),
    Views(ViewSet),
}

impl Sample {
    pub fn kind(&self) -> InputKind {
        match self {
            Sample::Voxels(_) => InputKind::Voxels,
            Sample::Points(_) => InputKind::Points,
            Sample::Views(_) => InputKind::Views,
        }
    }

    /// Turns the underlying shape by `k` steps of 30 degrees about the up
    /// axis. A view ring of `V` cameras shifts by `k * V / 12` positions,
    /// which must be whole.
    pub fn rotated(&self, k: i64, up: UpAxis) -> Result<Sample> {
        Ok(match self {
            Sample::Voxels(g) => Sample::Voxels(g.rotate_up(k, up)),
            Sample::Points(p) => Sample::Points(p.rotate_up(k, up)),
            Sample::Views(v) => {
                let n = v.views() as i64;
                let turn = STEPS_PER_TURN;
                if (k * n) % turn != 0 {
                    return Err(invalid!("a ring of {n} views cannot turn by {k} steps"));
                }
                let shift = (k * n / turn).rem_euclid(n) as usize;
                let px = v.height * v.width;
                let mut out = v.clone();
                for i in 0..v.views() {
                    let src = (i + shift) % v.views();
                    out.images[i * px..(i + 1) * px].copy_from_slice(v.image(src));
                }
                Sample::Views(out)
            }
        })
    }

    /// Rotation steps that map this sample onto itself structurally: all
    /// twelve for grids and clouds, multiples of `12 / V` for view rings.
    pub fn rotation_stride(&self) -> Option<usize> {
        match self {
            Sample::Views(v) if STEPS_PER_TURN as usize % v.views() != 0 => None,
            Sample::Views(v) => Some(STEPS_PER_TURN as usize / v.views()),
            _ => Some(1),
        }
    }

    /// Each view of a view set as its own single-view sample.
    pub fn split_views(&self) -> Vec<Sample> {
        match self {
            Sample::Views(v) => (0..v.views())
                .map(|i| {
                    Sample::Views(ViewSet {
                        mode: v.mode,
                        height: v.height,
                        width: v.width,
                        images: v.image(i).to_vec(),
                        cameras: vec![v.cameras[i].clone()],
                    })
                })
                .collect(),
            other => vec![other.clone()],
        }
    }
}

/// Batches samples of one kind into a model input tensor.
pub fn sample_tensor<F: Real>(samples: &[&Sample]) -> Result<Tensor<F>> {
    let first = samples.first().ok_or_else(|| invalid!("empty batch"))?;
    let kind = first.kind();
    if samples.iter().any(|s| s.kind() != kind) {
        return Err(invalid!("batch mixes representations"));
    }
    match kind {
        InputKind::Voxels => voxel_tensor(
            &samples
                .iter()
                .map(|s| match s {
                    Sample::Voxels(g) => g,
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>(),
        ),
        InputKind::Points => point_tensor(
            &samples
                .iter()
                .map(|s| match s {
                    Sample::Points(p) => p,
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>(),
        ),
        InputKind::Views => view_tensor(
            &samples
                .iter()
                .map(|s| match s {
                    Sample::Views(v) => v,
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>(),
        ),
    }
}

/// Labeled samples of one representation, addressed by shape id.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn new(num_classes: usize, ids: Vec<String>, labels: Vec<usize>, samples: Vec<Sample>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != samples.len() {
            return Err(invalid!(
                "sample set with {} ids, {} labels and {} samples",
                ids.len(),
                labels.len(),
                samples.len()
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid!("label {y} out of range for {num_classes} classes"));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.kind() != first.kind()) {
                return Err(invalid!("sample set mixes representations"));
            }
        }
        Ok(SampleSet {
            num_classes,
            ids,
            labels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> Option<InputKind> {
        self.samples.first().map(Sample::kind)
    }

    pub fn subset(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// The first `cap` samples of every class.
    pub fn cap_per_class(&self, cap: usize) -> Result<SampleSet> {
        Ok(self.subset(&capped_indices(self.labels.iter().copied(), cap)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn batch<F: Real>(&self, indices: &[usize]) -> Result<Tensor<F>> {
        sample_tensor(&indices.iter().map(|&i| &self.samples[i]).collect::<Vec<_>>())
    }

    /// Every view of every view set as a separate labeled sample; ids get a
    /// `#view` suffix.
    pub fn single_views(&self) -> SampleSet {
        let mut out = SampleSet {
            num_classes: self.num_classes,
            ids: Vec::new(),
            labels: Vec::new(),
            samples: Vec::new(),
        };
        for ((id, &y), s) in self.ids.iter().zip(&self.labels).zip(&self.samples) {
            for (v, view) in s.split_views().into_iter().enumerate() {
                out.ids.push(format!("{id}#{v}"));
                out.labels.push(y);
                out.samples.push(view);
            }
        }
        out
    }
}

/// `[B, 1, D, D, D]` batch of occupancy grids.
pub fn voxel_tensor<F: Real>(grids: &[&VoxelGrid]) -> Result<Tensor<F>> {
    let first = grids.first().ok_or_else(|| invalid!("empty voxel batch"))?;
    let d = first.resolution;
    let mut data = Vec::with_capacity(grids.len() * d * d * d);
    for g in grids {
        if g.resolution != d {
            return Err(dim_err!("voxel batch mixes resolutions {d} and {}", g.resolution));
        }
        check_occupancy(&g.occupancy)?;
        data.extend(g.occupancy.iter().map(|&v| F::of(v as f64)));
    }
    Tensor::new(vec![grids.len(), 1, d, d, d], data)
}

/// `[B, N, 3]` batch of point clouds with a common point count.
pub fn point_tensor<F: Real>(clouds: &[&PointCloud]) -> Result<Tensor<F>> {
    let first = clouds.first().ok_or_else(|| invalid!("empty point batch"))?;
    let n = first.len();
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(dim_err!("point batch mixes sizes {n} and {}", c.len()));
        }
        data.extend(c.points.iter().flatten().map(|&v| F::of(v as f64)));
    }
    Tensor::new(vec![clouds.len(), n, 3], data)
}

/// `[B, V, 1, H, W]` batch of rendered view sets.
pub fn view_tensor<F: Real>(sets: &[&ViewSet]) -> Result<Tensor<F>> {
    let first = sets.first().ok_or_else(|| invalid!("empty view batch"))?;
    let (v, h, w) = (first.views(), first.height, first.width);
    let mut data = Vec::with_capacity(sets.len() * v * h * w);
    for s in sets {
        if (s.views(), s.height, s.width) != (v, h, w) {
            return Err(dim_err!(
                "view batch mixes {v}x{h}x{w} and {}x{}x{}",
                s.views(),
                s.height,
                s.width
            ));
        }
        data.extend(s.images.iter().map(|&p| F::of(p as f64)));
    }
    Tensor::new(vec![sets.len(), v, 1, h, w], data)
}
