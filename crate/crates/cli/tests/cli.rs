use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use ssp_core::voxel::{load_volume, Manifest};

fn ssp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssp")).args(args).env_remove("SSP_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = ssp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().expect("some output")).expect("json summary")
}

/// Exit code and parsed stderr report of a failing run.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = ssp(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let report: Value = serde_json::from_slice(&out.stderr).expect("stderr is a JSON error report");
    assert_eq!(report["code"].as_i64().unwrap() as i32, out.status.code().unwrap());
    (out.status.code().unwrap(), report)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&["synth", "--seed", "3", "--tasks", "2", "--per-task", "4", "--shape", "16,32,32", "--ratio", "2", "--out", s(dir)]);
}

fn untrained(data: &Path, run: &Path) {
    ok(&["train", "--preset", "tiny", "--data", s(data), "--steps", "0", "--out", s(run)]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let summary =
            ok(&["synth", "--seed", "7", "--tasks", "3", "--per-task", "20", "--shape", "16,64,64", "--ratio", "2", "--out", s(d)]);
        assert_eq!(summary["samples"], 60);
        assert_eq!((summary["train"].as_u64(), summary["val"].as_u64(), summary["test"].as_u64()), (Some(42), Some(15), Some(3)));
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let manifest: Manifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for e in &manifest.samples {
        for f in [&e.x, &e.y] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
    let config: Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["synth"]["tasks"], 3);
    assert_eq!(config["seed"], 7);
}

#[test]
fn zero_tasks_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = fails(&["synth", "--tasks", "0", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code, 3);
    assert_eq!(report["error"], "config");
}

#[test]
fn usage_errors_are_json_too() {
    let (code, report) = fails(&["synth", "--tasks", "many"]);
    assert_eq!(code, 2);
    assert_eq!(report["error"], "usage");
    let help = ssp(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    assert!(text.contains("Exit codes:") && text.contains("output directory not empty"));
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    small_dataset(&out);
    let (code, _) = fails(&["synth", "--tasks", "2", "--per-task", "4", "--shape", "16,32,32", "--out", s(&out)]);
    assert_eq!(code, 5);
    ok(&["synth", "--tasks", "2", "--per-task", "4", "--shape", "16,32,32", "--out", s(&out), "--force"]);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"preset": "tiny", "topology": {"kind": "pure2d", "widht": 3}}"#).unwrap();
    let (code, report) = fails(&["profile", "--config", s(&cfg)]);
    assert_eq!(code, 3);
    assert!(report["message"].as_str().unwrap().contains("widht"));
}

#[test]
fn profile_orders_the_four_topologies() {
    let totals: Vec<u64> = ["pure2d", "hybrid_2to3d", "hybrid_3to2d", "pure3d"]
        .iter()
        .map(|k| ok(&["profile", "--preset", "paper", "--kind", k, "--format", "json"])["total_macs"].as_u64().unwrap())
        .collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    let table = ssp(&["profile", "--preset", "tiny", "--kind", "pure2d"]);
    assert!(String::from_utf8(table.stdout).unwrap().contains("total MACs"));
}

#[test]
fn untrained_checkpoint_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    small_dataset(&data);
    untrained(&data, &run);
    assert!(run.join("best.sspc").exists() && run.join("last.sspc").exists());
    let report = ok(&["eval", "--checkpoint", s(&run.join("last.sspc")), "--data", s(&data), "--split", "val"]);
    let r2 = report["metrics"]["overall"]["r2"].as_f64().unwrap();
    assert!(r2 <= 0.1, "untrained R2 {r2}");
}

#[test]
fn infer_writes_a_loadable_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, pred) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("pred"));
    small_dataset(&data);
    untrained(&data, &run);
    let input = data.join("volumes/t01_0000_x.vxg");
    let before = fs::read(&input).unwrap();
    let summary = ok(&["infer", "--checkpoint", s(&run.join("best.sspc")), "--input", s(&input), "--task", "1", "--out", s(&pred)]);
    let v = load_volume(pred.join("prediction.vxg")).unwrap();
    assert_eq!(v.dims(), [16, 32, 32]);
    assert_eq!(summary["dims"], serde_json::json!([16, 32, 32]));
    assert_eq!(fs::read(&input).unwrap(), before, "input untouched");

    let (code, _) =
        fails(&["infer", "--checkpoint", s(&run.join("best.sspc")), "--input", s(&input), "--task", "9", "--out", s(&pred), "--force"]);
    assert_eq!(code, 12);
}

#[test]
fn training_persists_config_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    small_dataset(&data);
    let args =
        ["train", "--preset", "tiny", "--data", s(&data), "--steps", "2", "--eval-interval", "1", "--batch-size", "1", "--seed", "5"];
    let mut first = args.to_vec();
    first.extend(["--out", s(&run)]);
    ok(&first);
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let config: Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["seed"], 5);
    assert_eq!(config["topology"]["task_count"], 2);

    // the persisted config reproduces the run bit for bit
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&run.join("config.json")), "--out", s(&again)]);
    assert_eq!(fs::read(run.join("last.sspc")).unwrap(), fs::read(again.join("last.sspc")).unwrap());
    assert_eq!(log, fs::read_to_string(again.join("log.jsonl")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    small_dataset(&data);
    untrained(&data, &run);
    let path = run.join("last.sspc");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    let (code, report) = fails(&["eval", "--checkpoint", s(&path), "--data", s(&data)]);
    assert_eq!((code, report["error"].as_str()), (6, Some("malformed_header")));
    bytes[0] = b'S';
    bytes.pop();
    fs::write(&path, &bytes).unwrap();
    assert_eq!(fails(&["eval", "--checkpoint", s(&path), "--data", s(&data)]).0, 7);
}
