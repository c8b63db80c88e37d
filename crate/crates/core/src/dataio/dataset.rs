use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::mesh::{normalize_shape, TriangleMesh};
use super::primitives::{generate_primitive, Primitive};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub mesh: TriangleMesh,
}

/// Labelled meshes in a fixed order. Subsetting and splitting preserve it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, records: Vec<ShapeRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.label >= class_names.len()) {
            return Err(invalid!(
                "record '{}' has label {} but only {} classes exist",
                r.id,
                r.label,
                class_names.len()
            ));
        }
        Ok(Dataset {
            class_names,
            records,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, which: Split) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.split == which)
                .cloned()
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }
}

/// Keeps the first `min(N_k, cap)` records of every class, in dataset order.
pub fn subset_by_class_count(dataset: &Dataset, cap: usize) -> Result<Dataset> {
    let keep = capped_indices(dataset.records.iter().map(|r| r.label), cap)?;
    Ok(Dataset {
        class_names: dataset.class_names.clone(),
        records: keep.into_iter().map(|i| dataset.records[i].clone()).collect(),
    })
}

/// Positions of the first `cap` items of every label, in order.
pub fn capped_indices(labels: impl IntoIterator<Item = usize>, cap: usize) -> Result<Vec<usize>> {
    if cap < 1 {
        return Err(invalid!("per-class cap must be at least 1"));
    }
    let mut seen: HashMap<usize, usize> = HashMap::new();
    Ok(labels
        .into_iter()
        .enumerate()
        .filter(|&(_, y)| {
            let n = seen.entry(y).or_default();
            *n += 1;
            *n <= cap
        })
        .map(|(i, _)| i)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            train_per_class: 60,
            test_per_class: 20,
            seed: 0,
        }
    }
}

/// Procedural five-class dataset of normalized primitives. Train records come
/// first, grouped by class; each shape has its own derived seed.
pub fn toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, class) in Primitive::ALL.into_iter().enumerate() {
        for i in 0..per_class {
            let shape_seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut mesh = normalize_shape(&generate_primitive(class, shape_seed))?;
            let split = if i < spec.train_per_class {
                Split::Train
            } else {
                Split::Test
            };
            let id = format!("{class}_{i:04}");
            mesh.id = id.clone();
            mesh.label = Some(label);
            let record = ShapeRecord {
                id,
                label,
                split,
                mesh,
            };
            match split {
                Split::Train => train.push(record),
                Split::Test => test.push(record),
            }
        }
    }
    train.extend(test);
    Dataset::new(
        Primitive::ALL.iter().map(|p| p.name().to_string()).collect(),
        train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> Dataset {
        let mut ds = toy_dataset(&ToySpec {
            train_per_class: 4,
            test_per_class: 2,
            seed: 5,
        })
        .unwrap();
        // Make one class short so the cap interacts with N_k.
        ds.records.retain(|r| !(r.label == 2 && r.id.ends_with("0003")));
        ds
    }

    #[test]
    fn toy_layout() {
        let ds = toy_dataset(&ToySpec {
            train_per_class: 3,
            test_per_class: 1,
            seed: 0,
        })
        .unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.split(Split::Train).class_counts(), vec![3; 5]);
        assert_eq!(ds.split(Split::Test).class_counts(), vec![1; 5]);
        let ids: HashSet<_> = ds.records.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn cap_keeps_min_of_count_and_cap() {
        let train = small().split(Split::Train);
        let sub = subset_by_class_count(&train, 10).unwrap();
        assert_eq!(sub, train);
        assert_eq!(sub.class_counts(), vec![4, 4, 3, 4, 4]);
        assert_eq!(subset_by_class_count(&train, 1).unwrap().class_counts(), vec![1; 5]);
        assert!(subset_by_class_count(&train, 0).is_err());
    }

    #[test]
    fn subset_keeps_first_records() {
        let train = small().split(Split::Train);
        let sub = subset_by_class_count(&train, 2).unwrap();
        for r in &sub.records {
            let n: usize = r.id.rsplit('_').next().unwrap().parse().unwrap();
            assert!(n < 2);
        }
    }

    #[test]
    fn nested_and_idempotent() {
        let ds = small();
        for m1 in 1..6 {
            let a = subset_by_class_count(&ds, m1).unwrap();
            assert_eq!(subset_by_class_count(&a, m1).unwrap(), a);
            for m2 in m1..7 {
                let b = subset_by_class_count(&ds, m2).unwrap();
                let ids: HashSet<_> = b.records.iter().map(|r| &r.id).collect();
                assert!(a.records.iter().all(|r| ids.contains(&r.id)));
            }
        }
    }
}
