use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::ProtocolConfig;
use crate::dataio::ToySpec;
use crate::error::{invalid, Error, Result};
use crate::evalbench::LinearSettings;
use crate::models::{Architecture, InputKind};
use crate::render::{RenderMode, DEFAULT_ELEVATION_DEG};
use crate::train::{DistillSettings, TrainSchedule, TwoStageSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Toy(ToySpec),
    /// `<path>/<class>/{train,test}/*.off`, classes in sorted order.
    OffDir { path: PathBuf },
}

/// Parameters of the `prepare` cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub voxel_resolution: usize,
    pub points: usize,
    pub views: usize,
    pub view_size: usize,
    pub render_mode: RenderMode,
    pub elevation_deg: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            voxel_resolution: 30,
            points: 2048,
            views: 12,
            view_size: 32,
            render_mode: RenderMode::Depth,
            elevation_deg: DEFAULT_ELEVATION_DEG,
        }
    }
}

/// A model together with the way it is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSetup {
    pub name: String,
    pub architecture: Architecture,
    #[serde(default)]
    pub schedule: TrainSchedule,
    /// Two-stage multiview training; replaces `schedule` for mvcnn.
    #[serde(default)]
    pub two_stage: Option<TwoStageSchedule>,
}

impl ModelSetup {
    /// Compact architecture with a schedule sized for the toy set on a CPU.
    pub fn desk(tag: &str) -> Result<Self> {
        let architecture = Architecture::compact(tag)?;
        let epochs = match tag {
            "pointnet" => 12,
            _ => 15,
        };
        let schedule = TrainSchedule {
            epochs,
            ..TrainSchedule::default()
        };
        let two_stage = (tag == "mvcnn").then(|| {
            let mut s = TwoStageSchedule::default();
            s.stage1.epochs = 4;
            s.stage1.learning_rate = 1e-3;
            s.stage2.epochs = 4;
            s.stage2.learning_rate = 1e-4;
            s
        });
        Ok(ModelSetup {
            name: tag.to_string(),
            architecture,
            schedule,
            two_stage,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid!("model name '{}' is not a plain directory name", self.name));
        }
        self.schedule.validate()?;
        if let Some(two) = &self.two_stage {
            if !matches!(self.architecture, Architecture::Mvcnn(_)) {
                return Err(invalid!("model '{}': two_stage applies to mvcnn only", self.name));
            }
            two.stage1.validate()?;
            two.stage2.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher: ModelSetup,
    pub settings: DistillSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSetup {
    /// Models to train and attack; all must take voxels or points.
    pub models: Vec<ModelSetup>,
    /// Indices into `models` whose hardest classes give the targets.
    #[serde(default = "default_references")]
    pub references: [usize; 2],
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

fn default_references() -> [usize; 2] {
    [0, 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub caps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<ModelSetup>,
    #[serde(default)]
    pub linear: LinearSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub models: Vec<ModelSetup>,
    #[serde(default = "default_bench_batch")]
    pub batch: usize,
    #[serde(default = "default_bench_reps")]
    pub repetitions: usize,
    #[serde(default = "default_budget_mb")]
    pub memory_budget_mb: usize,
}

fn default_bench_batch() -> usize {
    64
}
fn default_bench_reps() -> usize {
    5
}
fn default_budget_mb() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    /// Representations written by `prepare`.
    #[serde(default = "all_representations")]
    pub representations: Vec<InputKind>,
    #[serde(default)]
    pub prep: PrepConfig,
    pub model: ModelSetup,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub attack: Option<AttackSetup>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    pub out: PathBuf,
    /// Drives weight initialization, shuffling and augmentation everywhere;
    /// overrides the seeds inside schedules.
    pub seed: u64,
}

fn all_representations() -> Vec<InputKind> {
    vec![InputKind::Voxels, InputKind::Points, InputKind::Views]
}

impl ExperimentConfig {
    /// Toy-set experiment around a compact model of kind `tag`, with every
    /// optional section filled in.
    pub fn toy(tag: &str, out: impl Into<PathBuf>) -> Result<Self> {
        let desk = |t: &str| ModelSetup::desk(t);
        let mut teacher = desk("mvcnn")?;
        teacher.name = "teacher".into();
        Ok(ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetSource::Toy(ToySpec::default()),
            representations: all_representations(),
            prep: PrepConfig::default(),
            model: desk(tag)?,
            distill: Some(DistillConfig {
                teacher,
                settings: DistillSettings::new(10.0, 10.0),
            }),
            attack: Some(AttackSetup {
                models: vec![desk("voxmvcnn")?, desk("voxnet")?],
                references: default_references(),
                protocol: ProtocolConfig {
                    step_size: 1.0,
                    max_iterations: 25,
                    ..ProtocolConfig::default()
                },
            }),
            sweep: Some(SweepConfig { caps: vec![2, 10, 60] }),
            ensemble: Some(EnsembleConfig {
                members: vec![desk("voxnet")?, desk("pointnet")?],
                linear: LinearSettings::default(),
            }),
            bench: Some(BenchConfig {
                models: ["voxnet", "pointnet", "mvcnn", "voxmvcnn"]
                    .into_iter()
                    .map(desk)
                    .collect::<Result<_>>()?,
                batch: default_bench_batch(),
                repetitions: default_bench_reps(),
                memory_budget_mb: default_budget_mb(),
            }),
            out: out.into(),
            seed: 0,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding with `out` left empty, so the
    /// same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut anchored = self.clone();
        anchored.out = PathBuf::new();
        let bytes = serde_json::to_vec(&anchored).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if let DatasetSource::OffDir { path } = &self.dataset {
            if !path.is_dir() {
                return Err(Error::Config(format!("dataset.path: {} is not a directory", path.display())));
            }
        }
        let p = &self.prep;
        if p.voxel_resolution == 0 || p.points == 0 || p.views == 0 || p.view_size == 0 {
            return Err(Error::Config("prep: sizes must be positive".into()));
        }
        self.model.validate().map_err(|e| field("model", e))?;
        check_architecture(&self.model.architecture).map_err(|e| field("model.architecture", e))?;
        if !self.representations.contains(&self.model.architecture.input_kind()) {
            return Err(Error::Config(format!(
                "representations: {:?} does not include {:?}, which model '{}' consumes",
                self.representations,
                self.model.architecture.input_kind(),
                self.model.name
            )));
        }
        if let Some(d) = &self.distill {
            d.teacher.validate().map_err(|e| field("distill.teacher", e))?;
            d.settings.validate().map_err(|e| field("distill.settings", e))?;
        }
        if let Some(a) = &self.attack {
            if a.models.len() < 2 {
                return Err(Error::Config("attack.models: at least two models are needed".into()));
            }
            for (i, m) in a.models.iter().enumerate() {
                m.validate().map_err(|e| field(&format!("attack.models[{i}]"), e))?;
                if m.architecture.input_kind() == InputKind::Views {
                    return Err(Error::Config(format!(
                        "attack.models[{i}]: rendered-view models have no differentiable input"
                    )));
                }
            }
            if a.references.iter().any(|&r| r >= a.models.len()) || a.references[0] == a.references[1] {
                return Err(Error::Config("attack.references: need two distinct model indices".into()));
            }
            unique_names(&a.models).map_err(|e| field("attack.models", e))?;
        }
        if let Some(s) = &self.sweep {
            if s.caps.is_empty() || s.caps.contains(&0) {
                return Err(Error::Config("sweep.caps: need at least one positive cap".into()));
            }
        }
        if let Some(e) = &self.ensemble {
            if e.members.is_empty() {
                return Err(Error::Config("ensemble.members: empty".into()));
            }
            for (i, m) in e.members.iter().enumerate() {
                m.validate().map_err(|e| field(&format!("ensemble.members[{i}]"), e))?;
            }
            unique_names(&e.members).map_err(|e| field("ensemble.members", e))?;
        }
        if let Some(b) = &self.bench {
            if b.batch == 0 || b.repetitions == 0 {
                return Err(Error::Config("bench: batch and repetitions must be positive".into()));
            }
            unique_names(&b.models).map_err(|e| field("bench.models", e))?;
        }
        Ok(())
    }
}

fn check_architecture(arch: &Architecture) -> Result<()> {
    crate::models::ModelSpec::new(arch.clone(), 2).validate()
}

fn unique_names(models: &[ModelSetup]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for m in models {
        if !seen.insert(&m.name) {
            return Err(invalid!("duplicate model name '{}'", m.name));
        }
    }
    Ok(())
}
