use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polarwater")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("machine-readable error");
    assert!(v["error"]["message"].is_string());
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn curves_writes_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["curves", "--out", tmp.path().to_str().unwrap()]);
    let v = stdout_json(&out);
    assert_eq!(v["files"].as_array().unwrap().len(), 2);
    assert!(tmp.path().join("sky_polarization.csv").exists());
    assert!(tmp.path().join("water_reflection.csv").exists());
}

#[test]
fn default_config_round_trips_through_a_file() {
    let out = run(&["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("feature_set = \"with-azimuth\""), "{text}");
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("pipeline.toml");
    std::fs::write(&path, &text).unwrap();
    let data = synth_small(tmp.path());
    // training reads the file, so parse errors would surface here
    let v = stdout_json(&run(&[
        "train",
        "--manifest",
        data.join("manifest.toml").to_str().unwrap(),
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("models").to_str().unwrap(),
    ]));
    assert_eq!(v["frames_used"], 4);
}

fn synth_small(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(
        &spec,
        r#"
seed = 1
[scene]
width = 240
height = 135
[scene.camera]
focal_length = 135.0
[[batches]]
name = "a"
split = "train"
frames = 4
layout = { kind = "random", count = [2, 3], distance = [4.0, 12.0], axes = [1.0, 1.8] }
[[batches]]
name = "b"
split = "test"
frames = 2
layout = { kind = "random", count = [2, 3], distance = [4.0, 12.0], axes = [1.0, 1.8] }
"#,
    )
    .unwrap();
    let data = dir.join("data");
    let v = stdout_json(&run(&["synth", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    assert_eq!(v["frames"], 6);
    data
}

#[test]
fn full_run_and_feature_set_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path());
    let manifest = data.join("manifest.toml");
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let m = manifest.to_str().unwrap();

    stdout_json(&run(&["--threads", "2", "train", "--manifest", m, "--seed", "4", "--out", &p("models")]));
    let v = stdout_json(&run(&[
        "detect", "--manifest", m, "--models", &p("models"), "--seed", "4", "--out", &p("det"),
    ]));
    assert_eq!(v["frames"], 2);
    let v = stdout_json(&run(&[
        "eval", "--manifest", m, "--detections", &p("det"), "--seed", "4", "--out", &p("eval"),
    ]));
    assert_eq!(v["frames"], 2);
    assert!(v["pooled"]["accuracy"].as_f64().unwrap() > 0.5);

    let out = run(&[
        "detect", "--manifest", m, "--models", &p("models"), "--seed", "4", "--feature-set", "without-azimuth",
        "--out", &p("det2"),
    ]);
    assert_eq!(error_kind(&out), "feature_set_mismatch");
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = run(&["train", "--manifest", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(error_kind(&out), "io");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "threshold = -3.0\n").unwrap();
    let out = run(&[
        "train", "--manifest", missing.to_str().unwrap(), "--config", bad.to_str().unwrap(), "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(error_kind(&out), "invalid_parameter");

    let out = run(&["train", "--feature-set", "sideways"]);
    assert!(!out.status.success());
}
