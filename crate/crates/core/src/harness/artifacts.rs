use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::dataio::cache::write_json;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    /// Relative to the stage directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// False for files holding wall-clock measurements.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub precision: u32,
    pub version: String,
    pub status: Status,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub inventory: Vec<InventoryEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        crate::dataio::cache::read_json(path)
    }
}

/// Output directory of one pipeline run.
pub struct Stage {
    pub dir: PathBuf,
    volatile: BTreeSet<String>,
}

impl Stage {
    /// Claims `dir` for a run with `hash`. An existing manifest blocks the
    /// run unless `force`, in which case the old directory is removed.
    pub fn claim(dir: PathBuf, hash: &str, force: bool) -> Result<Stage> {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            if !force {
                let previous = Manifest::load(&manifest).map(|m| m.config_hash).unwrap_or_default();
                let why = if previous == hash {
                    "the same config hash"
                } else {
                    "a different config"
                };
                return Err(Error::Config(format!(
                    "{} already holds a run from {why} ({previous}); pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        } else if dir.is_dir() && force {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Stage {
            dir,
            volatile: BTreeSet::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Marks a file as timing-dependent so replays do not compare it.
    pub fn volatile(&mut self, rel: &str) {
        self.volatile.insert(rel.to_string());
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        write_json(&self.path(rel), value)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Hashes every file below the stage directory except the manifest.
    pub fn inventory(&self) -> Result<Vec<InventoryEntry>> {
        let mut files = Vec::new();
        walk(&self.dir, &mut files)?;
        files.sort();
        let mut out = Vec::with_capacity(files.len());
        for f in files {
            let rel = f
                .strip_prefix(&self.dir)
                .expect("walked below the stage")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let deterministic = !self.volatile.contains(&rel) && !rel.ends_with(".jsonl");
            out.push(InventoryEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
                deterministic,
            });
        }
        Ok(out)
    }

    /// Writes the manifest and, on failure, the marker file with the error.
    pub fn finish(&self, mut manifest: Manifest) -> Result<Manifest> {
        if manifest.status == Status::Failed {
            let msg = manifest.error.clone().unwrap_or_default();
            self.write_text(FAILURE_MARKER, &format!("{msg}\n"))?;
        }
        manifest.inventory = self.inventory()?;
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(manifest)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Deterministic entries whose hashes differ or that exist on one side only.
pub fn compare_inventories(a: &[InventoryEntry], b: &[InventoryEntry]) -> Vec<String> {
    let pick = |v: &[InventoryEntry]| {
        v.iter()
            .filter(|e| e.deterministic)
            .map(|e| (e.path.clone(), e.sha256.clone()))
            .collect::<std::collections::BTreeMap<_, _>>()
    };
    let (ma, mb) = (pick(a), pick(b));
    let keys: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
    keys.into_iter()
        .filter(|k| ma.get(*k) != mb.get(*k))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(status: Status) -> Manifest {
        Manifest {
            command: "train".into(),
            config_hash: "abc".into(),
            seed: 0,
            precision: 32,
            version: "0".into(),
            status,
            error: (status == Status::Failed).then(|| "boom".to_string()),
            config: ExperimentConfig::toy("voxnet", "/tmp/x").unwrap(),
            inventory: vec![],
        }
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("train");
        let mut s = Stage::claim(dir.clone(), "abc", false).unwrap();
        s.write_text("a.txt", "1").unwrap();
        s.write_text("log.jsonl", "{}").unwrap();
        s.write_text("sub/b.txt", "2").unwrap();
        s.volatile("a.txt");
        let m = s.finish(manifest(Status::Complete)).unwrap();
        let paths: Vec<_> = m.inventory.iter().map(|e| (e.path.as_str(), e.deterministic)).collect();
        assert_eq!(paths, vec![("a.txt", false), ("log.jsonl", false), ("sub/b.txt", true)]);
        let err = Stage::claim(dir.clone(), "abc", false).err().unwrap().to_string();
        assert!(err.contains("same config hash") && err.contains("--force"), "{err}");
        assert!(Stage::claim(dir.clone(), "def", false).err().unwrap().to_string().contains("different"));
        Stage::claim(dir.clone(), "abc", true).unwrap();
        assert!(!dir.join("a.txt").exists());
    }

    #[test]
    fn failure_marker_and_comparison() {
        let root = tempfile::tempdir().unwrap();
        let s = Stage::claim(root.path().join("x"), "abc", false).unwrap();
        s.write_text("partial.txt", "p").unwrap();
        let m = s.finish(manifest(Status::Failed)).unwrap();
        assert_eq!(fs::read_to_string(s.path(FAILURE_MARKER)).unwrap(), "boom\n");
        assert!(m.inventory.iter().any(|e| e.path == "partial.txt"));
        let mut other = m.inventory.clone();
        assert!(compare_inventories(&m.inventory, &other).is_empty());
        other[0].sha256 = "00".into();
        assert_eq!(compare_inventories(&m.inventory, &other), vec![other[0].path.clone()]);
        other.pop();
        assert!(!compare_inventories(&m.inventory, &other).is_empty());
    }
}
