//! End-to-end CLI checks through the compiled binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_styleaug"))
}

fn write_config(data_root: &Path, run_dir: &Path, path: &Path) {
    let cfg = serde_json::json!({
        "dataset": {
            "root": data_root, "format": "generic_csv", "task": "generic",
            "split_fractions": [0.7, 0.15, 0.15], "seed": 5
        },
        "style": {
            "encoder": "desk", "iterations": 20, "style_weight": 10.0,
            "lr": 1e-3, "batch": 2, "blend": 1.0
        },
        "augment": { "p1": 0.3, "p2": 0.2, "out_dir": run_dir.join("aug") },
        "model": {
            "backbone": { "architecture": "tinycnn", "frozen": true, "pretrained": false },
            "proj_width": 8, "head_hidden": 16, "dropout": 0.1,
            "tinycnn_widths": [4, 8, 16, 32]
        },
        "loss": { "gamma": 2.0, "alpha": 1.0, "l1": 0.0, "l2": 0.0, "reduction": "mean" },
        "train": {
            "batch": 16, "epochs": 2, "optimizer": "adam", "lr": 1e-2,
            "stage2_epochs": 1, "step_size": 10, "decay_factor": 0.1
        },
        "search": { "grid": { "lr": [1e-2] }, "tpe_trials": 1, "epochs": 1 },
        "output": { "run_dir": run_dir }
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn invalid_config_exits_nonzero_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(&cfg_path, r#"{"dataset": {"unknown_field": 1}}"#).unwrap();
    let out = bin().args(["--config", cfg_path.to_str().unwrap(), "train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    let record: serde_json::Value = serde_json::from_str(last).expect("machine-readable error");
    assert_eq!(record["kind"], "configuration");
}

#[test]
fn missing_config_flag_is_a_config_error() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "{stderr}");
}

#[test]
fn pipeline_then_evaluate_exit_zero_and_write_artifacts() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "fixture",
            "--root",
            data.path().to_str().unwrap(),
            "--class-sizes",
            "16,12,8,6",
            "--image-size",
            "64",
            "--fixture-seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg_path = run.path().join("config.json");
    write_config(data.path(), run.path(), &cfg_path);
    let out = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--workers", "2", "pipeline"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["metrics.json", "trials.jsonl", "config.lock.json", "classifier_final.ckpt"] {
        assert!(run.path().join(artifact).is_file(), "missing {artifact}");
    }

    // evaluate against the saved checkpoint refreshes metrics.json
    let out = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "evaluate", "--split", "val"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.path().join("metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["split"], "val");
}

#[test]
fn sweep_writes_expected_csv_layout() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    bin()
        .args([
            "fixture",
            "--root",
            data.path().to_str().unwrap(),
            "--class-sizes",
            "16,12,8,6",
            "--image-size",
            "64",
        ])
        .output()
        .unwrap();
    let cfg_path = run.path().join("config.json");
    write_config(data.path(), run.path(), &cfg_path);
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "sweep",
            "--p1-values",
            "0.2,0.4",
            "--p2-values",
            "0.1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "p1/p2,0.10");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.20,"));
    assert!(rows[1].starts_with("0.40,"));
    // each populated cell is acc/prec/rec
    let cell = rows[0].split(',').nth(1).unwrap();
    assert_eq!(cell.split('/').count(), 3, "cell format: {cell}");
}
