use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_nowcast");

fn config(dir: &Path, epochs: usize, horizons: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "run_id": "cli-test",
  "out_dir": "{out}",
  "seed": 3,
  "synthetic": {{
    "height": 20, "width": 20, "sequence_length": 120,
    "wind_segment_length": 12, "start_time": "2020-12-30T00:00:00"
  }},
  "data": {{
    "filter": {{"min_rain_fraction": 0.0, "rain_pixel_threshold": 0.0}},
    "split": {{"train_years": [2020], "test_year": 2021, "validation_fraction": 0.2, "seed": 0}}
  }},
  "model": {{"levels": 2, "base_channels": 2, "input_lag": 3, "height": 16, "width": 16, "dropout_rate": 0.5}},
  "train": {{"learning_rate": 0.001, "max_epochs": {epochs}}},
  "eval": {{"horizons": [{horizons}]}}
}}"#,
        out = dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn nowcast(args: &[&str]) -> Output {
    Command::new(BIN).args(args).arg("--quiet").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nowcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    nowcast(args).status.code().unwrap()
}

#[test]
fn synth_is_deterministic_and_needs_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--seed", "7", "--length", "200", "--grid", "16x16", "--out", out.to_str().unwrap()]);
    }
    for f in ["tp.rgs", "tp.json", "u.rgs", "u.json", "v.rgs", "v.json"] {
        assert_eq!(fs::read(a.join("raw").join(f)).unwrap(), fs::read(b.join("raw").join(f)).unwrap());
    }
    let out = dir.path().join("c");
    assert_eq!(code(&["synth", "--seed", "7", "--out", out.to_str().unwrap()]), 2);
    assert_eq!(code(&["synth", "--grid", "16by16"]), 2);
    assert_eq!(code(&["synth", "--grid", "4x4", "--out", out.to_str().unwrap()]), 2);
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2, "1");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&["train", "--model", "resnet", "--config", c]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    // No source grids yet: a data error.
    assert_eq!(code(&["build", "--config", c]), 3);
    ok(&["synth", "--config", c]);
    // No manifest yet: a configuration error.
    assert_eq!(code(&["train", "--model", "core-unet", "--config", c]), 2);
    ok(&["build", "--config", c]);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&["build", "--config", bad.to_str().unwrap()]), 2);
    // Corrupt a source header: a format error.
    let tp = dir.path().join("out/raw/tp.rgs");
    let mut bytes = fs::read(&tp).unwrap();
    bytes[0] = b'X';
    fs::write(&tp, bytes).unwrap();
    assert_eq!(code(&["build", "--config", c]), 3);
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3, "1");
    let text = fs::read_to_string(&cfg).unwrap().replace("\"learning_rate\": 0.001", "\"learning_rate\": 1e30");
    fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&["synth", "--config", c]);
    ok(&["build", "--config", c]);
    let out = nowcast(&["train", "--model", "core-unet", "--config", c]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2, "1, 2, 3");
    let c = cfg.to_str().unwrap();
    ok(&["synth", "--config", c]);
    let built = ok(&["build", "--config", c]);
    assert!(built.starts_with("horizon 1: train "));
    for h in ["1", "2", "3"] {
        ok(&["train", "--model", "core-unet", "--horizon", h, "--config", c]);
    }
    ok(&["train", "--model", "wf-unet", "--config", c]);
    let out = dir.path().join("out");
    assert!(out.join("models/wf-unet_h1/history.csv").exists());

    let table = ok(&["eval", "--models", "core-unet", "--horizons", "1,2,3", "--config", c]);
    assert_eq!(table.lines().filter(|l| l.starts_with("persistence,")).count(), 3);
    for h in 1..=3 {
        assert!(out.join(format!("eval/table_h{h}.csv")).exists());
    }
    assert!(out.join("eval/mse_by_horizon.svg").exists());
    let both = ok(&["eval", "--horizons", "1", "--config", c]);
    assert!(both.contains("\nwf-unet,1,") && both.contains("\ncore-unet,1,"));
    assert_eq!(code(&["eval", "--models", "wf-unet", "--horizons", "2", "--config", c]), 2);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("data/manifest_h1.json")).unwrap()).unwrap();
    let anchor = manifest["splits"]["test"][0].as_u64().unwrap().to_string();
    let first = ok(&["predict", "--model", "wf-unet", "--anchor", &anchor, "--config", c]);
    let second = ok(&["predict", "--model", "wf-unet", "--anchor", &anchor, "--config", c]);
    assert_eq!(first, second);
    assert!(first.starts_with("16x16 nowcast"));
    assert!(out.join(format!("predict/wf-unet_h1_a{anchor}.rgs")).exists());
    assert_eq!(code(&["predict", "--model", "wf-unet", "--anchor", "100000", "--config", c]), 3);
}

#[test]
fn killed_training_resumes_to_the_uninterrupted_result() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let (ca, cb) = (config(&a, 12, "1"), config(&b, 12, "1"));
    for c in [&ca, &cb] {
        ok(&["synth", "--config", c.to_str().unwrap()]);
        ok(&["build", "--config", c.to_str().unwrap()]);
    }
    ok(&["train", "--model", "wf-unet", "--config", ca.to_str().unwrap()]);

    let state = b.join("out/models/wf-unet_h1/state/state.json");
    let mut child = Command::new(BIN)
        .args(["train", "--model", "wf-unet", "--quiet", "--config", cb.to_str().unwrap()])
        .spawn()
        .unwrap();
    let clock = Instant::now();
    while !state.exists() && clock.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let saved: serde_json::Value = serde_json::from_slice(&fs::read(&state).unwrap()).unwrap();
    let done = saved["epochs_completed"].as_u64().unwrap();
    assert!(done < 12, "run finished before it could be interrupted");

    ok(&["train", "--model", "wf-unet", "--config", cb.to_str().unwrap()]);
    let params = |root: &Path| fs::read(root.join("out/models/wf-unet_h1/checkpoint/params.bin")).unwrap();
    assert_eq!(params(&a), params(&b));
    let losses = |root: &Path| {
        let csv = fs::read_to_string(root.join("out/models/wf-unet_h1/history.csv")).unwrap();
        csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
}
