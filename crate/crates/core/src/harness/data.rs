use std::fs;
use std::path::{Path, PathBuf};

use super::config::{DatasetSource, PrepConfig};
use crate::dataio::cache::{read_json, read_points, read_voxels, write_json, write_points, write_voxels, DatasetIndex, IndexEntry};
use crate::dataio::{load_off, normalize_shape, sample_points, toy_dataset, voxelize, Dataset, ShapeRecord, Split};
use crate::error::{invalid, Error, Result};
use crate::models::{Architecture, InputKind, Sample, SampleSet};
use crate::render::{read_views, render_views, ring_cameras, write_views, RenderMode, ViewSet};

pub const INDEX_FILE: &str = "index.json";

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Toy(spec) => toy_dataset(spec),
        DatasetSource::OffDir { path } => load_off_dir(path),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Reads `<root>/<class>/{train,test}/*.off`. Classes and files are taken in
/// sorted order; every mesh is normalized.
pub fn load_off_dir(root: &Path) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let mut records = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let class = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| invalid!("class directory {} is not valid UTF-8", class_dir.display()))?
            .to_string();
        for (split, sub) in [(Split::Train, "train"), (Split::Test, "test")] {
            let dir = class_dir.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for file in sorted_entries(&dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("off") {
                    continue;
                }
                let mesh = normalize_shape(&load_off(&file)?)?;
                let id = format!("{class}/{}", mesh.id);
                records.push(ShapeRecord {
                    id,
                    label,
                    split,
                    mesh: mesh.with_label(label),
                });
            }
        }
        class_names.push(class);
    }
    if records.is_empty() {
        return Err(invalid!("no OFF files found under {}", root.display()));
    }
    // Train records first, as for the toy set.
    records.sort_by_key(|r| r.split == Split::Test);
    Dataset::new(class_names, records)
}

/// How an architecture wants each shape turned into a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    Voxels(usize),
    Points(usize),
    Views {
        views: usize,
        size: usize,
        mode: RenderMode,
        elevation_deg: f64,
    },
}

impl Representation {
    pub fn for_model(arch: &Architecture, prep: &PrepConfig) -> Self {
        match arch {
            Architecture::VoxNet(c) => Representation::Voxels(c.input_size),
            Architecture::VoxMvcnn(c) => Representation::Voxels(c.resolution),
            Architecture::PointNet(_) => Representation::Points(prep.points),
            Architecture::Mvcnn(c) => Representation::Views {
                views: c.views,
                size: c.image_size,
                mode: c.render_mode,
                elevation_deg: prep.elevation_deg,
            },
        }
    }

    pub fn for_prep(kind: InputKind, prep: &PrepConfig) -> Self {
        match kind {
            InputKind::Voxels => Representation::Voxels(prep.voxel_resolution),
            InputKind::Points => Representation::Points(prep.points),
            InputKind::Views => Representation::Views {
                views: prep.views,
                size: prep.view_size,
                mode: prep.render_mode,
                elevation_deg: prep.elevation_deg,
            },
        }
    }
}

/// Converts record `position` of the dataset. Point sampling is seeded by
/// the position so every run sees the same clouds.
fn make_sample(record: &ShapeRecord, position: usize, repr: &Representation) -> Result<Sample> {
    Ok(match repr {
        Representation::Voxels(res) => {
            let mut g = voxelize(&record.mesh, *res)?;
            g.label = Some(record.label);
            Sample::Voxels(g)
        }
        Representation::Points(n) => {
            let mut p = sample_points(&record.mesh, *n, position as u64)?;
            p.label = Some(record.label);
            Sample::Points(p)
        }
        Representation::Views {
            views,
            size,
            mode,
            elevation_deg,
        } => {
            let cams = ring_cameras(*views, *elevation_deg, *size)?;
            Sample::Views(render_views(&record.mesh, &cams, *mode)?)
        }
    })
}

/// A `prepare` cache opened for reading.
pub struct Cache {
    dir: PathBuf,
    index: DatasetIndex,
    prep: PrepConfig,
}

impl Cache {
    /// Opens the cache in `dir` if it exists and was built from `dataset`.
    pub fn open(dir: &Path, dataset: &Dataset, prep: &PrepConfig) -> Result<Option<Cache>> {
        let path = dir.join(INDEX_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let index: DatasetIndex = read_json(&path)?;
        let same = index.class_names == dataset.class_names
            && index.entries.len() == dataset.len()
            && index
                .entries
                .iter()
                .zip(&dataset.records)
                .all(|(e, r)| e.id == r.id && e.label == r.label && e.split == r.split);
        if !same {
            log::warn!("cache at {} was built from a different dataset; ignoring it", dir.display());
            return Ok(None);
        }
        Ok(Some(Cache {
            dir: dir.to_path_buf(),
            index,
            prep: prep.clone(),
        }))
    }

    fn get(&self, position: usize, repr: &Representation) -> Result<Option<Sample>> {
        let entry = &self.index.entries[position];
        Ok(match repr {
            Representation::Voxels(res) if *res == self.index.voxel_resolution => match &entry.voxels {
                Some(stem) => {
                    let path = self.dir.join(stem);
                    let (dir, name) = split_stem(&path)?;
                    Some(Sample::Voxels(read_voxels(dir, name)?))
                }
                None => None,
            },
            Representation::Points(n) if *n == self.index.point_count => match &entry.points {
                Some(p) => Some(Sample::Points(read_points(&self.dir.join(p), Some(entry.label))?)),
                None => None,
            },
            Representation::Views {
                views,
                size,
                mode,
                elevation_deg,
            } if *views == self.index.view_count
                && *size == self.index.view_size
                && *mode == self.prep.render_mode
                && *elevation_deg == self.prep.elevation_deg =>
            {
                match &entry.views {
                    Some(stem) => {
                        let path = self.dir.join(stem);
                        let (dir, name) = split_stem(&path)?;
                        let v: ViewSet = read_views(dir, name)?;
                        (v.mode == *mode).then_some(Sample::Views(v))
                    }
                    None => None,
                }
            }
            _ => None,
        })
    }
}

fn split_stem(path: &Path) -> Result<(&Path, &str)> {
    let dir = path.parent().ok_or_else(|| invalid!("bad cache path {}", path.display()))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid!("bad cache path {}", path.display()))?;
    Ok((dir, name))
}

/// File stem for a shape id; ids from OFF directories contain a slash.
fn stem(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

/// Writes every requested representation of every shape plus the index.
pub fn write_cache(dataset: &Dataset, prep: &PrepConfig, kinds: &[InputKind], dir: &Path) -> Result<DatasetIndex> {
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, r) in dataset.records.iter().enumerate() {
        let s = stem(&r.id);
        let mut entry = IndexEntry {
            id: r.id.clone(),
            class: dataset.class_names[r.label].clone(),
            label: r.label,
            split: r.split,
            voxels: None,
            points: None,
            views: None,
        };
        for &kind in kinds {
            match make_sample(r, i, &Representation::for_prep(kind, prep))? {
                Sample::Voxels(g) => {
                    write_voxels(&dir.join("voxels"), &s, &g)?;
                    entry.voxels = Some(Path::new("voxels").join(&s));
                }
                Sample::Points(p) => {
                    let rel = Path::new("points").join(format!("{s}.bin"));
                    write_points(&dir.join(&rel), &p)?;
                    entry.points = Some(rel);
                }
                Sample::Views(v) => {
                    write_views(&dir.join("views"), &s, &v)?;
                    entry.views = Some(Path::new("views").join(&s));
                }
            }
        }
        entries.push(entry);
    }
    let index = DatasetIndex {
        class_names: dataset.class_names.clone(),
        voxel_resolution: prep.voxel_resolution,
        point_count: prep.points,
        view_count: prep.views,
        view_size: prep.view_size,
        entries,
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Train and test sample sets of `dataset` in the representation `repr`,
/// reading from `cache` where it holds a match.
pub fn sample_sets(dataset: &Dataset, repr: &Representation, cache: Option<&Cache>) -> Result<(SampleSet, SampleSet)> {
    let mut parts = [(Vec::new(), Vec::new(), Vec::new()), (Vec::new(), Vec::new(), Vec::new())];
    let mut from_cache = 0;
    for (i, r) in dataset.records.iter().enumerate() {
        let cached = match cache {
            Some(c) => c.get(i, repr)?,
            None => None,
        };
        let sample = match cached {
            Some(s) => {
                from_cache += 1;
                s
            }
            None => make_sample(r, i, repr)?,
        };
        let part = &mut parts[usize::from(r.split == Split::Test)];
        part.0.push(r.id.clone());
        part.1.push(r.label);
        part.2.push(sample);
    }
    if from_cache > 0 {
        log::info!("{from_cache} of {} samples read from the prepare cache", dataset.len());
    }
    let [train, test] = parts;
    let c = dataset.num_classes();
    Ok((
        SampleSet::new(c, train.0, train.1, train.2)?,
        SampleSet::new(c, test.0, test.1, test.2)?,
    ))
}
