use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvshift_core::attention::ShiftSpec;
use kvshift_core::model::ModelConfig;
use kvshift_core::tasks::InductionParams;
use kvshift_core::train::{AdamConfig, LossPositions, MetricRecord, TaskConfig, TrainConfig};
use kvshift_lab::formats::read_metrics;
use kvshift_lab::output::RunManifest;
use kvshift_lab::runner::{Arm, Experiment};

fn kvshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvshift"))
        .args(args)
        .env("KVSHIFT_OUT_ROOT", std::env::temp_dir().join("kvshift-cli-tests"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(steps: u64, lr: f64, warmup: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::toy_width(1, ShiftSpec::KV_SHIFT),
        task: TaskConfig::Induction(InductionParams::DESK),
        loss_positions: LossPositions::AllTokens,
        lr_peak: lr,
        warmup_steps: warmup,
        adam: AdamConfig::default(),
        batch: 4,
        steps,
        seed: 3,
        eval_every: 3,
        eval_samples: 16,
        clip_norm: Some(1.0),
        decay_all: false,
    }
}

fn write_experiment(dir: &Path, cfg: TrainConfig, checkpoint_every: u64) -> PathBuf {
    let e = Experiment {
        name: "tiny".into(),
        description: String::new(),
        checkpoint_every,
        arms: vec![Arm {
            name: "kv".into(),
            config: cfg,
        }],
    };
    let p = dir.join("tiny.json");
    fs::write(&p, serde_json::to_string_pretty(&e).unwrap()).unwrap();
    p
}

fn without_wall(v: Vec<MetricRecord>) -> Vec<MetricRecord> {
    v.into_iter().map(|r| MetricRecord { wall_ms: 0, ..r }).collect()
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a.jsonl"), d.path().join("b.jsonl"));
    for p in [&a, &b] {
        let o = kvshift(&["gen-data", "--task", "induction", "--count", "30", "--seed", "7", "--out", s(p)]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = RunManifest::load(&d.path().join("a.jsonl.manifest.json")).unwrap();
    assert_eq!((m.subcommand.as_str(), m.seed), ("gen-data", Some(7)));
    assert_eq!(m.artifacts, vec![a.clone()]);
    let z = d.path().join("z.jsonl");
    let o = kvshift(&["gen-data", "--task", "simplified", "--count", "0", "--out", s(&z)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&z).unwrap().lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&kvshift(&["gen-data", "--task", "nope"])), 2);
    assert_eq!(code(&kvshift(&["gen-data", "--task", "ngram", "--preset", "paper"])), 2);
    assert_eq!(code(&kvshift(&["train", "--config", "no-such-preset"])), 2);
    assert_eq!(code(&kvshift(&["theory", "--check", "th9"])), 2);
    assert_eq!(code(&kvshift(&["frobnicate"])), 2);
}

#[test]
fn theory_checks_report_and_write_files() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("th2");
    let o = kvshift(&["theory", "--check", "th2", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("PASS th2: max_abs="), "{}", stdout(&o));
    assert!(out.join("th2.json").exists() && out.join("th2-model.kvsl").exists());
    assert!(out.join("manifest.json").exists());

    let out = d.path().join("land");
    let o = kvshift(&["theory", "--check", "landscape", "--ot", "100", "--resolution", "200", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 40_000);

    let out = d.path().join("gd");
    let o = kvshift(&[
        "theory", "--check", "landscape", "--ot", "100", "--resolution", "3", "--gd-start", "0.5,0.5", "--gd-steps",
        "2000", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let paths: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gd-trajectories.json")).unwrap()).unwrap();
    let last = paths[0]["trajectory"]["points"].as_array().unwrap().last().unwrap().clone();
    let (a, b) = (last[0].as_f64().unwrap(), last[1].as_f64().unwrap());
    assert!(a.hypot(b - 1.0) < 0.25, "ended at ({a}, {b})");
}

#[test]
fn failing_check_exits_1_with_the_quantity() {
    // One p₁ value leaves no ratio to test, so the check cannot pass.
    let d = tempfile::tempdir().unwrap();
    let o = kvshift(&["theory", "--check", "th1", "--p1-max", "1", "--out", s(&d.path().join("t"))]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("FAIL th1: worst ratio"), "{}", stdout(&o));
}

#[test]
fn constructed_model_evaluates_perfectly_and_mismatch_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("th2");
    assert_eq!(code(&kvshift(&["theory", "--check", "th2", "--probes", "5", "--out", s(&out)])), 0);
    let ck = out.join("th2-model.kvsl");
    let res = d.path().join("eval.json");
    let o = kvshift(&["eval", "--ckpt", s(&ck), "--task", "induction-desk", "--count", "24", "--out", s(&res)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&res).unwrap()).unwrap();
    assert_eq!(m["accuracy"], 1.0);
    assert_eq!(m["count"], 24);
    let o = kvshift(&["eval", "--ckpt", s(&ck), "--task", "induction-paper", "--out", s(&res)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab"));
}

#[test]
fn train_resume_rerun_census_and_lock() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_experiment(d.path(), tiny(6, 1e-3, 2), 3);
    let full = d.path().join("full");
    let o = kvshift(&["train", "--config", s(&cfg), "--strict", "--quiet", "--out-dir", s(&full)]);
    assert_eq!(code(&o), 0, "{o:?}");
    let arm = full.join("kv");
    let metrics = read_metrics(&arm.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert!(metrics[2].task_acc.is_some() && metrics[1].task_acc.is_none());
    assert!(arm.join("step-000003.kvsl").exists() && arm.join("final.kvsl").exists());

    // Resuming from step 3 reproduces the uninterrupted run.
    let resumed = d.path().join("resumed");
    let ck = arm.join("step-000003.kvsl");
    let o = kvshift(&["train", "--config", s(&cfg), "--strict", "--quiet", "--resume", s(&ck), "--out-dir", s(&resumed)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read(resumed.join("kv/final.kvsl")).unwrap(), fs::read(arm.join("final.kvsl")).unwrap());
    let tail = read_metrics(&resumed.join("kv/metrics.jsonl")).unwrap();
    assert_eq!(without_wall(tail), without_wall(metrics[3..].to_vec()));

    // Replaying the manifest gives the same bytes.
    let again = d.path().join("again");
    let o = kvshift(&["rerun", "--manifest", s(&full.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read(again.join("kv/final.kvsl")).unwrap(), fs::read(arm.join("final.kvsl")).unwrap());
    assert_eq!(
        without_wall(read_metrics(&again.join("kv/metrics.jsonl")).unwrap()),
        without_wall(metrics.clone())
    );

    let census = d.path().join("census.json");
    let o = kvshift(&["census", "--ckpt", s(&arm.join("final.kvsl")), "--out", s(&census)]);
    assert_eq!(code(&o), 0);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(&census).unwrap()).unwrap();
    assert_eq!(c["total"], 2);

    fs::write(full.join(".kvshift.lock"), "1").unwrap();
    let o = kvshift(&["train", "--config", s(&cfg), "--quiet", "--out-dir", s(&full)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn resume_with_another_config_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_experiment(d.path(), tiny(3, 1e-3, 2), 3);
    let out = d.path().join("a");
    assert_eq!(code(&kvshift(&["train", "--config", s(&cfg), "--quiet", "--out-dir", s(&out)])), 0);
    let mut other = tiny(3, 1e-3, 2);
    other.model = ModelConfig::toy_width(1, ShiftSpec::VANILLA);
    let cfg2 = d.path().join("vanilla.json");
    fs::write(&cfg2, serde_json::to_string(&other).unwrap()).unwrap();
    let ck = out.join("kv/final.kvsl");
    let o = kvshift(&["train", "--config", s(&cfg2), "--resume", s(&ck), "--out-dir", s(&d.path().join("b"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn numeric_blow_up_exits_3_and_keeps_the_last_good_state() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_experiment(d.path(), tiny(20, 1e30, 0), 100);
    let out = d.path().join("nan");
    let o = kvshift(&["train", "--config", s(&cfg), "--quiet", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 3, "{o:?}");
    assert!(out.join("kv/last-good.kvsl").exists());
    assert!(out.join("manifest.json").exists());
}
