// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn stid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stid"))
        .current_dir(dir)
        .args(args)
        .env_remove("STID_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gen_counts_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"extraction": {"objects": ["dog", "cup"]}, "intervention": {"samples": 4}}"#);
    let a = stid(dir.path(), &["--config", &cfg, "--seed", "3", "--out", "a", "gen"]);
    assert!(a.status.success(), "{a:?}");
    assert_eq!(field(&stdout(&a), "sweep_traces"), "32");
    let b = stid(dir.path(), &["--config", &cfg, "--seed", "3", "--out", "b", "gen"]);
    assert_eq!(field(&stdout(&a), "digest"), field(&stdout(&b), "digest"));
    let c = stid(dir.path(), &["--config", &cfg, "--seed", "4", "--out", "c", "gen"]);
    assert_ne!(field(&stdout(&a), "digest"), field(&stdout(&c), "digest"));

    let env = Command::new(env!("CARGO_BIN_EXE_stid"))
        .current_dir(dir.path())
        .args(["--config", &cfg, "--out", "d", "gen"])
        .env("STID_SEED", "3")
        .output()
        .unwrap();
    assert_eq!(field(&stdout(&a), "digest"), field(&stdout(&env), "digest"));

    let video = write_config(
        dir.path(),
        r#"{"toy": {"frames": 8}, "extraction": {"objects": ["dog", "cup", "chair", "lamp", "plant"]}, "intervention": {"samples": 2}}"#,
    );
    let v = stid(dir.path(), &["--config", &video, "--out", "v", "gen"]);
    assert!(v.status.success(), "{v:?}");
    assert_eq!(field(&stdout(&v), "sweep_traces"), "40");
}

#[test]
fn pipeline_writes_bundle_and_passes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = stid(dir.path(), &["--seed", "1", "--workers", "2", "pipeline"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    for sub in ["grids", "axes", "swaps", "steers", "diagnosis", "fits"] {
        let n = std::fs::read_dir(dir.path().join("out").join(sub)).unwrap().count();
        assert!(n >= 2, "{sub} has {n} files");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["analysis_layer"], 2);
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"extraction": {"objects": ["dog", "cup"]}, "intervention": {"samples": 6}}"#);
    for cmd in ["gen", "extract-ids", "axes", "swap", "steer", "diagnose", "fit-posenc", "report"] {
        let o = stid(dir.path(), &["--config", &cfg, cmd]);
        assert!(o.status.success(), "{cmd}: {o:?}");
    }
    assert!(dir.path().join("out/summary.json").exists());
}

#[test]
fn early_layers_only_flag_degenerate_grids() {
    let dir = tempfile::tempdir().unwrap();
    let o = stid(dir.path(), &["--layers", "0", "pipeline"]);
    assert!(o.status.success(), "{o:?}");
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["degenerate_layers"], serde_json::json!([0]));
    let grids = std::fs::read_to_string(dir.path().join("out/grids/grids.csv")).unwrap();
    assert!(grids.contains("universal,degenerate"));
}

#[test]
fn emitted_requests_replay_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"extraction": {"objects": ["dog", "cup"]}, "intervention": {"samples": 3}}"#);
    let o = stid(dir.path(), &["--config", &cfg, "--emit-intervention-requests", "pipeline"]);
    assert!(o.status.success(), "{o:?}");
    let req = dir.path().join("out/swaps/requests/pair0000_L02.json");
    assert!(req.exists());
    assert!(!dir.path().join("out/swaps/swaps.csv").exists());
    let r = stid(
        dir.path(),
        &["--config", &cfg, "run", "--request", req.to_str().unwrap(), "--readout-out", "resp.json"],
    );
    assert!(r.status.success(), "{r:?}");
    let resp: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("resp.json")).unwrap()).unwrap();
    assert!(resp["candidates"]["left"].as_f64().unwrap() <= 0.0);
}

#[test]
fn run_scene_writes_a_loadable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let scene = r#"{"placements": [{"object": "dog", "cell": [0, 0], "frame": 0}, {"object": "cup", "cell": [0, 3], "frame": 0}],
        "query": {"kind": "spatial_lr", "subject": "dog", "reference": "cup"}, "noise_seed": 1}"#;
    std::fs::write(dir.path().join("scene.json"), scene).unwrap();
    let o = stid(dir.path(), &["run", "--scene", "scene.json", "--trace-out", "t"]);
    assert!(o.status.success(), "{o:?}");
    assert!(dir.path().join("t/manifest.json").exists());
    let readout: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(readout["candidates"]["left"].as_f64().unwrap() > readout["candidates"]["right"].as_f64().unwrap());
}

#[test]
fn exit_codes_separate_bad_input_from_stage_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"extraction": {"objects": ["unicorn"]}}"#);
    assert_eq!(stid(dir.path(), &["--config", &bad, "gen"]).status.code(), Some(2));
    assert_eq!(stid(dir.path(), &["--selector", "nope", "gen"]).status.code(), Some(2));
    assert_eq!(stid(dir.path(), &["--config", "missing.json", "gen"]).status.code(), Some(2));
    assert_eq!(stid(dir.path(), &["--bogus-flag", "gen"]).status.code(), Some(2));
    let o = stid(dir.path(), &["--out", "empty", "axes"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `axes`"));
}
