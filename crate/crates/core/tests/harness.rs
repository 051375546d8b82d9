use std::fs;

use proptest::prelude::*;
use scalify_core::harness::{self, preset, tail_mean, ExperimentConfig, LrSchedule};
use scalify_core::nn::ModelConfig;
use scalify_core::scalify::EpsPlacement;
use scalify_core::DType;

fn tiny(k: usize, steps: usize) -> ExperimentConfig {
    let mut cfg = preset(k).unwrap();
    cfg.model = ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        vocab: 16,
        seq_len: 8,
        batch: 2,
    };
    cfg.steps = steps;
    cfg
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny(3, 12);
    let a = harness::run_experiment(&cfg, None).unwrap();
    let b = harness::run_experiment(&cfg, None).unwrap();
    let bits = |r: &harness::RunResult| r.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let mut other = cfg.clone();
    other.seed = 1;
    let c = harness::run_experiment(&other, None).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn exact_scalified_fp32_matches_the_plain_baseline() {
    let base = tiny(0, 15);
    let mut scaled = base.clone();
    scaled.scalify = true;
    scaled.layer_norm_eps = EpsPlacement::Logical;
    let a = harness::run_experiment(&base, None).unwrap().losses();
    let b = harness::run_experiment(&scaled, None).unwrap().losses();
    assert_eq!(a.len(), 15);
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "step {i}: {x} vs {y}");
    }
}

#[test]
fn zero_step_run_writes_empty_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let res = harness::run_experiment(&tiny(1, 0), Some(dir.path())).unwrap();
    assert_eq!(res.summary.steps_completed, 0);
    assert_eq!(res.summary.final_loss, None);
    assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["steps_completed"], 0);
    assert!(!dir.path().join("diagnostics.txt").exists());
}

#[test]
fn telemetry_has_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let res = harness::run_experiment(&tiny(2, 100), Some(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 100);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        assert!(l["loss"].as_f64().unwrap().is_finite());
    }
    let csv = fs::read_to_string(dir.path().join("scales.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 1 + res.paths.len());
    assert_eq!(res.summary.layernorm_rescale_sites_per_block, 2.0);
    let first = res.summary.initial_loss.unwrap();
    assert!(res.summary.tail_loss.unwrap() < first, "no learning: {:?}", res.summary);
}

#[test]
fn blow_up_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(1, 20);
    cfg.lr = LrSchedule {
        peak: 1e30,
        warmup_frac: 0.0,
        ..LrSchedule::default()
    };
    let res = harness::run_experiment(&cfg, Some(dir.path())).unwrap();
    let a = res.summary.aborted.as_ref().expect("run should abort");
    assert!(res.summary.steps_completed < 20);
    assert_eq!(a.step, res.summary.steps_completed);
    let text = fs::read_to_string(dir.path().join("diagnostics.txt")).unwrap();
    assert!(text.contains("first non-finite tensor:"), "{text}");
    assert!(text.contains(&a.tensor), "{text}");
    assert!(text.contains("node #"), "{text}");
    assert_eq!(fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines().count(), a.step);
}

#[test]
fn layer_norm_sites_follow_the_recipe() {
    for k in 0..harness::PRESET_COUNT {
        let res = harness::run_experiment(&tiny(k, 0), None).unwrap();
        let want = if preset(k).unwrap().dynamic_rescaling.layernorm_bwd { 2.0 } else { 0.0 };
        assert_eq!(res.summary.layernorm_rescale_sites_per_block, want, "preset {k}");
    }
}

#[test]
fn config_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    let mut cfg = tiny(4, 3);
    cfg.optimizer_state_fmt = DType::F16;
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
    fs::write(&p, "{not json").unwrap();
    assert!(ExperimentConfig::load(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tail_mean_lies_within_the_tail(losses in prop::collection::vec(0.0f64..10.0, 1..200)) {
        let m = tail_mean(&losses).unwrap();
        let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn schedule_stays_within_bounds(peak in 1e-5f64..1.0, warm in 0.0f64..0.5, min in 0.0f64..1.0, n in 1usize..500) {
        let s = LrSchedule { peak, warmup_frac: warm, min_ratio: min };
        for t in 0..n {
            let lr = s.at(t, n);
            prop_assert!(lr > 0.0 || min == 0.0);
            prop_assert!(lr <= peak * (1.0 + 1e-12));
        }
    }
}
