use std::path::Path;
use std::process::Command as Process;

use shapecls::dataio::ToySpec;
use shapecls::evalbench::EvalReport;
use shapecls::harness::{self, Command, DatasetSource, ExperimentConfig, Manifest, RunOptions, Status};

fn small(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::toy("voxnet", out).unwrap();
    c.dataset = DatasetSource::Toy(ToySpec {
        train_per_class: 20,
        test_per_class: 5,
        seed: 3,
    });
    c.model.schedule.epochs = 6;
    c.model.schedule.batch_size = 16;
    c
}

#[test]
fn prepare_caches_every_representation_of_every_shape() {
    let root = tempfile::tempdir().unwrap();
    let config = small(root.path());
    let manifest = harness::run(Command::Prepare, &config, RunOptions::default()).unwrap();
    assert_eq!(manifest.status, Status::Complete);
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.path().join("prepare/index.json")).unwrap()).unwrap();
    let entries = index["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 5 * 25);
    let listed: std::collections::HashSet<&str> = manifest.inventory.iter().map(|e| e.path.as_str()).collect();
    for e in entries {
        for key in ["voxels", "points", "views"] {
            let rel = e[key].as_str().unwrap_or_else(|| panic!("{key} missing for {}", e["id"]));
            assert!(
                listed.iter().any(|p| p.starts_with(rel)),
                "{rel} not in the inventory"
            );
        }
    }
}

#[test]
fn train_then_eval_beats_chance_and_reruns_need_force() {
    let root = tempfile::tempdir().unwrap();
    let config = small(root.path());
    harness::run(Command::Train, &config, RunOptions::default()).unwrap();
    let eval = harness::run(Command::Eval, &config, RunOptions::default()).unwrap();
    assert!(eval.inventory.iter().any(|e| e.path == "eval.json"));
    let report: EvalReport =
        serde_json::from_slice(&std::fs::read(root.path().join("eval/eval.json")).unwrap()).unwrap();
    assert!(report.per_instance > 0.2 + 0.1, "accuracy {}", report.per_instance);
    let trained: EvalReport =
        serde_json::from_slice(&std::fs::read(root.path().join("train/eval.json")).unwrap()).unwrap();
    assert_eq!(trained, report);

    let err = harness::run(Command::Train, &config, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    let forced = RunOptions {
        force: true,
        ..RunOptions::default()
    };
    harness::run(Command::Train, &config, forced).unwrap();
}

#[test]
fn failing_pipeline_keeps_a_marker_and_a_failed_manifest() {
    let root = tempfile::tempdir().unwrap();
    let config = small(root.path());
    // No checkpoint yet, so eval fails after claiming its directory.
    assert!(harness::run(Command::Eval, &config, RunOptions::default()).is_err());
    let dir = root.path().join("eval");
    assert!(dir.join(harness::FAILURE_MARKER).is_file());
    let m = Manifest::load(&dir.join(harness::MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, Status::Failed);
    assert!(m.error.unwrap().contains("train"));
}

#[test]
fn cli_exit_status_follows_the_outcome() {
    let bin = env!("CARGO_BIN_EXE_shapecls");
    let root = tempfile::tempdir().unwrap();
    let config = small(&root.path().join("run"));

    let mut bad: serde_json::Value = serde_json::from_str(&config.to_json()).unwrap();
    bad["model"]["schedule"]["epochs"] = 0.into();
    let bad_path = root.path().join("bad.json");
    std::fs::write(&bad_path, bad.to_string()).unwrap();
    let out = Process::new(bin)
        .args(["--config", bad_path.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epochs"), "{stderr}");

    let mut typo: serde_json::Value = serde_json::from_str(&config.to_json()).unwrap();
    typo["distill"]["settings"]["temprature"] = 4.into();
    std::fs::write(&bad_path, typo.to_string()).unwrap();
    let out = Process::new(bin)
        .args(["--config", bad_path.to_str().unwrap(), "prepare"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("temprature"));

    let good = root.path().join("good.json");
    std::fs::write(&good, config.to_json()).unwrap();
    let out = Process::new(bin)
        .args(["--config", good.to_str().unwrap(), "render-debug"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = Process::new(bin)
        .args(["--config", good.to_str().unwrap(), "render-debug"])
        .output()
        .unwrap();
    assert!(!again.status.success());
}
