use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scalify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalify"))
        .args(args)
        .env("SCALIFY_LOG_LEVEL", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, steps: usize) -> String {
    let p = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "name": "tiny",
        "matmul_fmt": "e4m3",
        "grad_fmt": "e5m2",
        "master_state_fmt": "fp16",
        "scalify": true,
        "dynamic_rescaling": {"layernorm_bwd": true},
        "model": {"layers": 1, "dim": 16, "heads": 2, "vocab": 16, "seq_len": 8, "batch": 2},
        "steps": steps,
    });
    fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 30);
    let outs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        let r = scalify(&["run", "--config", &cfg, "--seed", "7", "--out", o.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(stdout(&r).contains("30 steps"), "{}", stdout(&r));
    }
    for f in ["metrics.jsonl", "summary.json", "scales.csv"] {
        let a = fs::read(outs[0].join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outs[0].join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["steps_completed"], 30);
}

#[test]
fn preset_run_with_step_override() {
    let r = scalify(&["run", "--preset", "0", "--steps", "2"]);
    assert!(r.status.success());
    assert!(stdout(&r).starts_with("preset0-fp32: 2 steps"), "{}", stdout(&r));
}

#[test]
fn snr_reports_the_scaling_gap() {
    let r = scalify(&["snr", "--fmt", "e4m3", "--sigma-exp", "-12", "--samples", "4000"]);
    assert!(r.status.success());
    let text = stdout(&r);
    let row: Vec<f64> = text.lines().nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], -12.0);
    assert!(row[3] >= 20.0, "{text}");
    let sweep = scalify(&["snr", "--samples", "500"]);
    assert_eq!(stdout(&sweep).lines().count(), 30);
}

#[test]
fn check_passes() {
    let r = scalify(&["check", "--graphs", "200", "--seed", "5"]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("all outputs bit-identical"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(scalify(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(scalify(&["run"]).status.code(), Some(2));
    assert_eq!(scalify(&["run", "--preset", "9"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"master_state_fmt": "e4m3"}"#).unwrap();
    let r = scalify(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("config error"));
    let missing = dir.path().join("missing.json");
    assert_eq!(scalify(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn blow_up_exits_1_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("hot.json");
    let cfg = serde_json::json!({
        "name": "hot",
        "matmul_fmt": "fp16",
        "grad_fmt": "fp16",
        "scalify": true,
        "model": {"layers": 1, "dim": 16, "heads": 2, "vocab": 16, "seq_len": 8, "batch": 2},
        "lr": {"peak": 1e30, "warmup_frac": 0.0},
        "steps": 20,
    });
    fs::write(&p, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let r = scalify(&["run", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("aborted at step"));
    assert!(fs::read_to_string(out.join("diagnostics.txt")).unwrap().contains("first non-finite tensor"));
}
