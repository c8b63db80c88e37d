//! Named parameter storage and its on-disk format.
//!
//! A checkpoint is a flat little-endian binary32 blob holding every tensor
//! back to back, plus a JSON manifest with the path, shape and byte offset of
//! each entry.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BatchNormState, Graph, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Trainable tensors and batch-norm running statistics of one model, keyed
/// by dotted path. Iteration order is the sorted key order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
    buffers: BTreeMap<String, BatchNormState<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for every parameter bound into one forward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("missing parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, state: BatchNormState<F>) {
        self.buffers.insert(name.into(), state);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| invalid!("missing parameter '{name}'"))
    }

    pub fn buffer(&self, name: &str) -> Result<&BatchNormState<F>> {
        self.buffers
            .get(name)
            .ok_or_else(|| invalid!("missing batch-norm statistics '{name}'"))
    }

    pub fn set_buffer(&mut self, name: &str, state: BatchNormState<F>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| invalid!("missing batch-norm statistics '{name}'"))?;
        *slot = state;
        Ok(())
    }

    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid!("missing parameter '{name}'"))?;
        if slot.shape() != value.shape() {
            return Err(invalid!(
                "parameter '{name}' has shape {:?}, update has {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &BatchNormState<F>)> {
        self.buffers.iter()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over the binary32 blob; equal checkpoints hash equal.
    pub fn checksum(&self) -> String {
        let (_, blob) = self.encode();
        hex::encode(Sha256::digest(&blob))
    }

    fn entries(&self) -> Vec<(String, Vec<usize>, Vec<F>, bool)> {
        let mut out = Vec::new();
        for (k, v) in &self.params {
            out.push((k.clone(), v.shape().to_vec(), v.to_vec(), true));
        }
        for (k, st) in &self.buffers {
            let c = st.mean.len();
            out.push((format!("{k}.running_mean"), vec![c], st.mean.clone(), false));
            out.push((format!("{k}.running_var"), vec![c], st.var.clone(), false));
        }
        out
    }

    fn encode(&self) -> (ParamManifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (path, shape, values, trainable) in self.entries() {
            entries.push(ManifestEntry {
                path,
                shape,
                offset: blob.len() as u64,
                trainable,
            });
            for v in values {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        (
            ParamManifest {
                format_version: FORMAT_VERSION,
                dtype: "binary32-le".into(),
                total_bytes: blob.len() as u64,
                entries,
            },
            blob,
        )
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let manifest: ParamManifest =
            serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
        let bin = dir.join(format!("{stem}.bin"));
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Self::decode(&manifest, &blob)
    }

    pub fn decode(manifest: &ParamManifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(invalid!(
                "unsupported parameter format version {}",
                manifest.format_version
            ));
        }
        if blob.len() as u64 != manifest.total_bytes {
            return Err(invalid!(
                "blob holds {} bytes, manifest expects {}",
                blob.len(),
                manifest.total_bytes
            ));
        }
        let mut store = ParamStore::new();
        let mut stats: BTreeMap<String, (Option<Vec<F>>, Option<Vec<F>>)> = BTreeMap::new();
        for e in &manifest.entries {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * count;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| invalid!("entry '{}' runs past the blob", e.path))?;
            let values: Vec<F> = bytes
                .chunks_exact(4)
                .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            if e.trainable {
                store.insert(e.path.clone(), Tensor::new(e.shape.clone(), values)?);
            } else if let Some(base) = e.path.strip_suffix(".running_mean") {
                stats.entry(base.to_string()).or_default().0 = Some(values);
            } else if let Some(base) = e.path.strip_suffix(".running_var") {
                stats.entry(base.to_string()).or_default().1 = Some(values);
            } else {
                return Err(invalid!("unknown buffer entry '{}'", e.path));
            }
        }
        for (name, pair) in stats {
            match pair {
                (Some(mean), Some(var)) => store.insert_buffer(name, BatchNormState { mean, var }),
                _ => return Err(invalid!("incomplete running statistics for '{name}'")),
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub format_version: u32,
    pub dtype: String,
    pub total_bytes: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

impl ParamManifest {
    /// Trainable scalar count as recorded in the manifest.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn manifest(&self) -> ParamManifest {
        self.encode().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("fc.weight", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3]).unwrap());
        s.insert("fc.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s.insert_buffer(
            "bn",
            BatchNormState {
                mean: vec![0.5, -0.5],
                var: vec![2.0, 3.0],
            },
        );
        s
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save(dir.path(), "params").unwrap();
        let back = ParamStore::<f32>::load(dir.path(), "params").unwrap();
        assert_eq!(s, back);
        assert_eq!(s.checksum(), back.checksum());
    }

    #[test]
    fn manifest_offsets_are_little_endian_binary32() {
        let s = sample();
        let (m, blob) = s.encode();
        assert_eq!(m.format_version, FORMAT_VERSION);
        let bias = m.entries.iter().find(|e| e.path == "fc.bias").unwrap();
        let o = bias.offset as usize;
        assert_eq!(f32::from_le_bytes(blob[o..o + 4].try_into().unwrap()), 0.1);
        assert_eq!(m.parameter_count(), 9);
        assert_eq!(m.total_bytes, 4 * (9 + 4));
    }

    #[test]
    fn rejects_truncated_blob() {
        let s = sample();
        let (m, blob) = s.encode();
        assert!(ParamStore::<f32>::decode(&m, &blob[..blob.len() - 4]).is_err());
    }
}
