use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SUBCOMMANDS: &[&str] = &[
    "train",
    "distill",
    "fuse",
    "verify",
    "bench",
    "breakdown",
    "erf",
    "featdist",
    "dump-affine",
    "inspect-ckpt",
    "gen-data",
];

fn riformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, mixer: &str) -> PathBuf {
    let preset = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/guideline1_ce.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(preset).unwrap()).unwrap();
    cfg["model"]["mixer"] = serde_json::json!({ "kind": mixer });
    cfg["model"]["input_resolution"] = 32.into();
    for split in ["train", "val"] {
        cfg["data"][split]["source"]["resolution"] = 32.into();
        cfg["data"][split]["source"]["samples_per_class"] = 2.into();
    }
    cfg["train"]["epochs"] = 1.into();
    cfg["train"]["batch_size"] = 8.into();
    cfg["bench"] = serde_json::json!({ "batch_size": 2, "resolution": 32, "warmup_runs": 1, "timed_runs": 2, "repeats": 1 });
    let path = dir.join(format!("tiny_{mixer}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn train(dir: &Path, cfg: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let o = riformer(&["train", "--config", s(cfg), "--seed", seed, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn every_flag_has_a_description() {
    for sub in SUBCOMMANDS {
        let o = riformer(&[sub, "--help"]);
        assert!(o.status.success(), "{sub} --help");
        let text = String::from_utf8(o.stdout).unwrap();
        let flags: Vec<&str> = text.lines().map(str::trim_start).filter(|l| l.starts_with("--") || l.starts_with("-h")).collect();
        assert!(flags.len() >= 2, "{sub}: {text}");
        for line in flags {
            let described = line.split_once("  ").map(|(_, d)| !d.trim().is_empty()).unwrap_or(false);
            assert!(described, "{sub}: undocumented flag `{line}`");
        }
    }
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(riformer(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(riformer(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = riformer(&["train", "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "affine");
    let a = train(dir.path(), &cfg, "a.ckpt", "5");
    let b = train(dir.path(), &cfg, "b.ckpt", "5");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.csv").exists());
    let c = train(dir.path(), &cfg, "c.ckpt", "6");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn fuse_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "affine");
    let model = train(dir.path(), &cfg, "m.ckpt", "0");
    let fused = dir.path().join("m_deploy.ckpt");
    let o = riformer(&["fuse", "--in", s(&model), "--out", s(&fused)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = riformer(&["verify", "--train", s(&model), "--deploy", s(&fused), "--probes", "4", "--tol", "1e-5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], Value::Bool(true));

    let o = riformer(&["verify", "--train", s(&model), "--deploy", s(&fused), "--probes", "4", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let o = riformer(&["inspect-ckpt", "--ckpt", s(&fused)]);
    assert!(o.status.success());
    let manifest: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(manifest.is_object());
    assert!(o.stdout.windows(10).any(|w| w == b"fused_from"));

    let o = riformer(&["dump-affine", "--ckpt", s(&model)]);
    assert!(o.status.success());
    let rows = String::from_utf8(o.stdout).unwrap();
    let channels = 16 + 32 + 3 * 64 + 128;
    assert_eq!(rows.lines().count(), 1 + channels);
    assert_eq!(riformer(&["dump-affine", "--ckpt", s(&fused)]).status.code(), Some(2));
}

#[test]
fn fusing_a_pooling_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pooling");
    let model = train(dir.path(), &cfg, "p.ckpt", "0");
    let o = riformer(&["fuse", "--in", s(&model), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_whole_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.bin");
    let o = riformer(&["gen-data", "--classes", "3", "--per-class", "4", "--resolution", "32", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::metadata(&out).unwrap().len(), 3073 * 12);
}

#[test]
fn bench_and_analysis_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "affine");
    let model = train(dir.path(), &cfg, "m.ckpt", "0");

    let csv = dir.path().join("bench.csv");
    let o = riformer(&["bench", "--config", s(&cfg), "--ckpt", s(&model), "--deploy", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("model,component,mean_ms,median_ms,images_per_s,thread_count"));
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("m-deploy"));

    let o = riformer(&["breakdown", "--config", s(&cfg), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let o = riformer(&["erf", "--ckpt", s(&model), "--images", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = String::from_utf8(o.stdout).unwrap();
    assert_eq!(grid.lines().count(), 32);
    assert!(grid.lines().all(|l| l.split(',').count() == 32));

    let o = riformer(&["featdist", "--ckpt", s(&model), "--config", s(&cfg), "--stage", "2", "--bins", "11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 12);
    assert_eq!(riformer(&["featdist", "--ckpt", s(&model), "--stage", "4"]).status.code(), Some(2));
}
