use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use runet::analysis::AnalysisReport;
use runet::io::read_volume;

fn runet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_runet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_prints_parseable_json() {
    let out = runet(&["analyze", "--variant", "rf64", "--format", "json"]);
    assert!(out.status.success());
    let r = AnalysisReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(AnalysisReport::from_json(&r.to_json()).unwrap(), r);
    assert_eq!(r.layer("SegHead1").unwrap().rf, [26, 64, 64]);

    let table = runet(&["analyze", "--variant", "rf112"]);
    assert!(table.status.success());
    assert!(String::from_utf8_lossy(&table.stdout).contains("SegHead2"));
}

#[test]
fn golden_comparison_sets_exit_status() {
    assert!(runet(&["analyze", "--variant", "rf64", "--golden"]).status.success());
    assert!(runet(&["analyze", "--variant", "rf88", "--golden"]).status.success());
    // The checked-in RF112 table lists ResBlock2 at 7x34x34, which the layer
    // arithmetic cannot produce (it gives 7x32x32).
    let out = runet(&["analyze", "--variant", "rf112", "--golden"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ResBlock2"), "{err}");
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = runet(&["--config", s(&cfg), "--out", s(dir.path()), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!runet(&["analyze", "--input", "1,2"]).status.success());
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let model_dir = root.join("run");
    let cfg = smoke();
    let ok = |args: &[&str]| {
        let out = runet(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["--config", &cfg, "--out", s(&data), "synth"]);
    ok(&["--config", &cfg, "--out", s(&model_dir), "train", "--data", s(&data)]);
    for f in ["model/network.json", "model/weights.bin", "train_log.jsonl", "train_summary.json", "config.toml"] {
        assert!(model_dir.join(f).exists(), "{f}");
    }
    let model = model_dir.join("model");

    let image: PathBuf = data.join("cases/case_005/image");
    let inf = root.join("infer");
    ok(&["--config", &cfg, "--out", s(&inf), "infer", "--model", s(&model), "--image", s(&image)]);
    let (img, _) = read_volume(&image).unwrap();
    let (prob, _) = read_volume(&inf.join("prob")).unwrap();
    let (mask, side) = read_volume(&inf.join("mask")).unwrap();
    assert_eq!(prob.dims(), img.dims());
    assert_eq!(prob.spacing(), img.spacing());
    assert_eq!(mask.dims(), img.dims());
    assert_eq!(side.kind, runet::io::VolumeKind::Mask);
    let boxes: serde_json::Value = serde_json::from_slice(&std::fs::read(inf.join("boxes.json")).unwrap()).unwrap();
    assert_eq!(boxes["members"][0].as_array().unwrap().len() as u64, boxes["decoder_calls"][0].as_u64().unwrap());

    let ev = root.join("eval");
    let out = ok(&["--config", &cfg, "--out", s(&ev), "eval", "--model", s(&model), "--data", s(&data)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["cases"], 2);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["variants"][0], "rf64");
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(ev.join("timings.json").exists());
}
