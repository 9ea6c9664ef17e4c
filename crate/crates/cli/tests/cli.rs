use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decornet_core::data::{read_nifti, read_split_file};

fn decornet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decornet"))
        .args(args)
        .arg("--log=warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = decornet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--volumes", "6", "--slices", "2", "--size", "32", "--seed", "4", "--out", s(&data)]);
    data.join("manifest.csv")
}

fn tiny_config(dir: &Path, manifest: &Path) -> PathBuf {
    let config = serde_json::json!({
        "model": { "channels": [4, 4, 8, 8, 8] },
        "optim": { "epochs": 2, "batch_size": 4, "lr0": 0.003 },
        "data": { "manifest": manifest, "augmentation": { "enabled": false } },
        "deterministic": true,
    });
    let path = dir.join("base.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

fn manifest_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

/// Trains a two-epoch run with an overridden λ.
fn trained_run(dir: &Path) -> PathBuf {
    let manifest = write_corpus(dir);
    let config = tiny_config(dir, &manifest);
    let run = dir.join("run");
    ok(&["train", "--config", s(&config), "--set", "loss.lambda_decor=0.02", "--out", s(&run)]);
    run
}

#[test]
fn train_eval_predict_probe_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained_run(tmp.path());

    let m = manifest_json(&run);
    assert_eq!(m["command"], "train");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["loss"]["lambda_decor"], 0.02);
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["loss"]["lambda_decor"], 0.02);
    assert_eq!(m["config"], snapshot);
    for f in ["best.safetensors", "last.safetensors", "train_log.csv", "split.txt", "test_metrics.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // eval: one row per test volume plus footers
    let ckpt = run.join("best.safetensors");
    let eval_dir = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    let split = read_split_file(&run.join("split.txt")).unwrap();
    let csv = std::fs::read_to_string(eval_dir.join("test_metrics.csv")).unwrap();
    let rows = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean") && !l.starts_with("pooled") && !l.starts_with("slice_mean"))
        .count();
    assert_eq!(rows, split.test.len());
    assert!(eval_dir.join("test_metrics.json").exists());

    let eval_again = tmp.path().join("eval2");
    ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval_again)]);
    assert_eq!(csv, std::fs::read_to_string(eval_again.join("test_metrics.csv")).unwrap());

    // predict: same shape, binary, monotone in the threshold
    let volume = tmp.path().join("data").join(format!("{}.nii.gz", split.test[0]));
    let mut foreground = Vec::new();
    for t in ["0.5", "0.7"] {
        let out = tmp.path().join(format!("pred_{t}"));
        ok(&["predict", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--threshold", t, "--out", s(&out)]);
        let mask = read_nifti(&out.join(format!("{}_mask.nii.gz", split.test[0]))).unwrap();
        assert_eq!(mask.dim(), read_nifti(&volume).unwrap().dim());
        assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
        foreground.push(mask.iter().filter(|&&v| v == 1.0).count());
    }
    assert!(foreground[1] <= foreground[0]);

    // probe: rows of the averaged map sum to one
    let probe_dir = tmp.path().join("probe");
    ok(&["probe", "--checkpoint", s(&ckpt), "--partition", "val", "--out", s(&probe_dir)]);
    let matrix = std::fs::read_to_string(probe_dir.join("probe_layer2.csv")).unwrap();
    let rows: Vec<Vec<f64>> = matrix
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(row.len(), 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let bad_layer = decornet(&["probe", "--checkpoint", s(&ckpt), "--layer", "6", "--out", s(&probe_dir)]);
    assert_eq!(bad_layer.status.code(), Some(2));
}

#[test]
fn bad_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out_dir = tmp.path().join("eval");
    let out = decornet(&["eval", "--checkpoint", s(&junk), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let m = manifest_json(&out_dir);
    assert_eq!(m["command"], "eval");
    assert!(m["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn missing_manifest_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join("manifest.csv");
    let out = decornet(&[
        "train",
        "--set",
        &format!("data.manifest={}", s(&missing)),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = decornet(&["train", "--set", "optim.lr0=-1", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(run.join("run_manifest.json").exists());
    let out = decornet(&["train", "--set", "model.channels=1,2,3", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reweighted_override_reaches_snapshot() {
    // validation happens before data access, so a missing manifest still
    // leaves the resolved config in the manifest
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = decornet(&[
        "train",
        "--set",
        "model.channels=248,248,112,112,112",
        "--set",
        "data.manifest=/nonexistent/manifest.csv",
        "--out",
        s(&run),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let m = manifest_json(&run);
    assert_eq!(m["config"]["model"]["channels"], serde_json::json!([248, 248, 112, 112, 112]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn sweep_of_two_configs_gives_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let config = tiny_config(tmp.path(), &manifest);
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--config",
        s(&config),
        "--set",
        "optim.epochs=1",
        "--channels",
        "4,4,8,8,8",
        "--channels",
        "8,4,4,4,4",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",decor,")).count(), 2);
}

#[test]
fn sweep_rejects_single_config_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let r = decornet(&[
        "sweep",
        "--set",
        "data.manifest=m.csv",
        "--channels",
        "4,4,8,8,8",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.join("sweep.csv").exists());
}
