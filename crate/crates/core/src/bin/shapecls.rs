use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use shapecls::harness::{self, Command, ExperimentConfig, Precision, RunOptions};

#[derive(Parser)]
#[command(name = "shapecls", version, about = "Train, evaluate and attack 3D shape classifiers")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing run in the output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_parser = ["32", "64"], default_value = "32")]
    precision: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the voxel, point and view cache.
    Prepare,
    /// Train the configured model and score it on the test split.
    Train,
    /// Score the model saved by `train`.
    Eval,
    /// Train a teacher, then a baseline and a distilled student.
    Distill,
    /// Run the paired-target adversarial protocol.
    Attack,
    /// Accuracy as a function of per-class training set size.
    Sweep,
    /// Probability-averaging and linear-probe ensembles.
    Ensemble,
    /// Forward timing and parameter counts.
    Bench,
    /// Dump rendered and line-integral views as PGM images.
    RenderDebug,
    /// Re-run a finished pipeline from its manifest and compare artifacts.
    Replay {
        manifest: PathBuf,
    },
    /// Print a toy-set config for the given architecture.
    InitConfig {
        #[arg(value_enum)]
        architecture: Arch,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Voxnet,
    Pointnet,
    Mvcnn,
    Voxmvcnn,
}

impl Arch {
    fn tag(self) -> &'static str {
        match self {
            Arch::Voxnet => "voxnet",
            Arch::Pointnet => "pointnet",
            Arch::Mvcnn => "mvcnn",
            Arch::Voxmvcnn => "voxmvcnn",
        }
    }
}

fn pipeline(cmd: &Cmd) -> Option<Command> {
    Some(match cmd {
        Cmd::Prepare => Command::Prepare,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Distill => Command::Distill,
        Cmd::Attack => Command::Attack,
        Cmd::Sweep => Command::Sweep,
        Cmd::Ensemble => Command::Ensemble,
        Cmd::Bench => Command::Bench,
        Cmd::RenderDebug => Command::RenderDebug,
        Cmd::Replay { .. } | Cmd::InitConfig { .. } => return None,
    })
}

fn execute(cli: Cli) -> Result<()> {
    let precision = Precision::from_bits(cli.precision.parse()?)?;
    match &cli.command {
        Cmd::InitConfig { architecture } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/toy"));
            let mut config = ExperimentConfig::toy(architecture.tag(), out)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            println!("{}", config.to_json());
            return Ok(());
        }
        Cmd::Replay { manifest } => {
            let out = cli.out.clone().context("replay needs --out for the new run")?;
            let report = harness::replay(manifest, &out, cli.force)?;
            if report.mismatches.is_empty() {
                println!("replay matches: {} artifacts", report.replayed.inventory.len());
                return Ok(());
            }
            bail!("replay differs in: {}", report.mismatches.join(", "));
        }
        _ => {}
    }
    let command = pipeline(&cli.command).expect("pipeline subcommand");
    let path = cli.config.as_ref().context("--config is required")?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    let manifest = harness::run(
        command,
        &config,
        RunOptions {
            force: cli.force,
            precision,
        },
    )
    .with_context(|| format!("{} failed", command.name()))?;
    println!(
        "{} complete: {} artifacts in {}",
        command.name(),
        manifest.inventory.len(),
        harness::stage_dir(&config, command).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
