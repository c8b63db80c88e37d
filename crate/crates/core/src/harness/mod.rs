//! Experiment configuration, artifact directories with manifests, and the
//! pipelines behind each CLI subcommand.

mod artifacts;
mod config;
mod data;
mod pipelines;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use artifacts::{compare_inventories, InventoryEntry, Manifest, Stage, Status, FAILURE_MARKER, MANIFEST_FILE};
pub use config::{
    AttackSetup, BenchConfig, DatasetSource, DistillConfig, EnsembleConfig, ExperimentConfig, ModelSetup, PrepConfig,
    SweepConfig, SCHEMA_VERSION,
};
pub use data::{load_dataset, load_off_dir, sample_sets, write_cache, Cache, Representation};

use crate::error::{Error, Result};
use pipelines::Pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Prepare,
    Train,
    Eval,
    Distill,
    Attack,
    Sweep,
    Ensemble,
    Bench,
    RenderDebug,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Prepare,
        Command::Train,
        Command::Eval,
        Command::Distill,
        Command::Attack,
        Command::Sweep,
        Command::Ensemble,
        Command::Bench,
        Command::RenderDebug,
    ];

    /// Subcommand name; also the output subdirectory.
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Distill => "distill",
            Command::Attack => "attack",
            Command::Sweep => "sweep",
            Command::Ensemble => "ensemble",
            Command::Bench => "bench",
            Command::RenderDebug => "render-debug",
        }
    }

    pub fn parse(name: &str) -> Result<Command> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown command '{name}'")))
    }
}

/// Floating-point width used for all model arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Precision> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => Err(Error::Config(format!("precision must be 32 or 64, got {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub force: bool,
    pub precision: Precision,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            precision: Precision::Single,
        }
    }
}

pub fn stage_dir(config: &ExperimentConfig, command: Command) -> PathBuf {
    config.out.join(command.name())
}

/// Runs one pipeline into `<out>/<command>/` and writes its manifest. On a
/// pipeline error the partial artifacts stay, a failure marker and a failed
/// manifest are written, and the error is returned.
pub fn run(command: Command, config: &ExperimentConfig, options: RunOptions) -> Result<Manifest> {
    config.validate()?;
    let hash = config.hash();
    let mut stage = Stage::claim(stage_dir(config, command), &hash, options.force)?;
    log::info!("{} -> {} (config {})", command.name(), stage.dir.display(), &hash[..12]);
    let outcome = Pipeline::new(config).and_then(|p| match options.precision {
        Precision::Single => p.run::<f32>(command, &mut stage),
        Precision::Double => p.run::<f64>(command, &mut stage),
    });
    let manifest = Manifest {
        command: command.name().to_string(),
        config_hash: hash,
        seed: config.seed,
        precision: options.precision.bits(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if outcome.is_ok() { Status::Complete } else { Status::Failed },
        error: outcome.as_ref().err().map(|e| e.to_string()),
        config: config.clone(),
        inventory: Vec::new(),
    };
    let written = stage.finish(manifest)?;
    outcome.map(|_| written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original: Manifest,
    pub replayed: Manifest,
    /// Deterministic artifacts whose contents differ.
    pub mismatches: Vec<String>,
}

/// Re-runs the pipeline recorded in a manifest with its config, seed and
/// precision, writing under `out`, and compares the deterministic artifacts.
pub fn replay(manifest_path: &Path, out: &Path, force: bool) -> Result<ReplayReport> {
    let original = Manifest::load(manifest_path)?;
    let command = Command::parse(&original.command)?;
    let mut config = original.config.clone();
    if config.hash() != original.config_hash {
        return Err(Error::Config(format!(
            "{}: embedded config does not match its hash",
            manifest_path.display()
        )));
    }
    config.out = out.to_path_buf();
    let options = RunOptions {
        force,
        precision: Precision::from_bits(original.precision)?,
    };
    let replayed = run(command, &config, options)?;
    let mismatches = compare_inventories(&original.inventory, &replayed.inventory);
    Ok(ReplayReport {
        original,
        replayed,
        mismatches,
    })
}
