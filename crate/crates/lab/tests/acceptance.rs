//! Acceptance gate: one PASS/FAIL line per criterion and a summary. The
//! target itself fails only if a criterion cannot be evaluated, or on any
//! FAIL line when `KVSHIFT_ACCEPTANCE_STRICT=1`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use kvshift_core::attention::{ShiftParams, ShiftSpec, ShiftVariant};
use kvshift_core::gradcheck::grad_check;
use kvshift_core::graph::SeqLayout;
use kvshift_core::model::{Model, ModelConfig};
use kvshift_core::theory::{shift_param_quadrant_census, LogitVariant};
use kvshift_core::{RngStream, Tensor};
use kvshift_lab::checkpoint::{decode, encode, Checkpoint};
use kvshift_lab::checks;
use kvshift_lab::dataset::{gen_preset, write_dataset, Generator};
use kvshift_lab::presets::preset;
use kvshift_lab::runner::{run_arm, ArmOutcome, Experiment, Reduction, RunOptions};

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(v: &Verdict) {
    println!(
        "criterion {} {}: {} {}",
        v.id,
        v.name,
        if v.passed { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn train(exp: &Experiment, arm: &str, dir: &Path) -> ArmOutcome {
    let t = Instant::now();
    let a = exp.arm(arm).unwrap();
    let opts = RunOptions {
        reduction: Reduction::auto(),
        verbose: false,
    };
    let out = run_arm(a, &dir.join(&exp.name).join(arm), exp.checkpoint_every, None, &opts).unwrap();
    eprintln!(
        "  trained {}/{} in {:.0}s: {:?}",
        exp.name,
        arm,
        t.elapsed().as_secs_f64(),
        out.accuracy_curve()
    );
    out
}

fn fmt_step(s: Option<u64>) -> String {
    s.map_or("never".into(), |s| s.to_string())
}

fn depth(dir: &Path) -> Verdict {
    let exp = preset("fig1-depth").unwrap();
    let kv = train(&exp, "kvshift-1L", dir);
    let v1 = train(&exp, "vanilla-1L", dir);
    let v2 = train(&exp, "vanilla-2L", dir);
    let (kv_acc, v1_acc) = (kv.final_accuracy().unwrap(), v1.final_accuracy().unwrap());
    let (kv90, v290) = (kv.first_reaching(0.9), v2.first_reaching(0.9));
    let later = matches!((kv90, v290), (Some(a), Some(b)) if b > a);
    // Induction configuration of the shift coefficients: some head with
    // α₂ > α₁ and β₁ > β₂.
    let ck = kvshift_lab::checkpoint::load(&kv.final_checkpoint, None).unwrap();
    let census = shift_param_quadrant_census(&ck.model).unwrap();
    let mut detail = format!(
        "kvshift-1L acc={kv_acc:.4} (>=0.95) reaches 0.9 at {}; vanilla-1L acc={v1_acc:.4} (<=0.20); vanilla-2L acc={:.4} reaches 0.9 at {}",
        fmt_step(kv90),
        v2.final_accuracy().unwrap(),
        fmt_step(v290)
    );
    let _ = write!(detail, "; kvshift-1L heads with a2>a1,b1>b2: {}", census.alpha_le_beta_gt);
    Verdict {
        id: 1,
        name: "depth",
        passed: kv_acc >= 0.95 && v1_acc <= 0.20 && later && census.alpha_le_beta_gt > 0,
        detail,
    }
}

fn width(dir: &Path) -> Verdict {
    let exp = preset("fig2-width").unwrap();
    let kv = train(&exp, "kvshift-1L", dir).final_accuracy().unwrap();
    let v2 = train(&exp, "vanilla-2L", dir).final_accuracy().unwrap();
    Verdict {
        id: 2,
        name: "width",
        passed: kv - v2 >= 0.30,
        detail: format!("hidden 8: kvshift-1L acc={kv:.4} vanilla-2L acc={v2:.4} gap={:.4} (>=0.30)", kv - v2),
    }
}

fn ngram(dir: &Path) -> Verdict {
    let exp = preset("fig4-ngram").unwrap();
    let kv = train(&exp, "kvshift-2L", dir).final_accuracy().unwrap();
    let v = train(&exp, "vanilla-2L", dir).final_accuracy().unwrap();
    Verdict {
        id: 3,
        name: "3-gram parity",
        passed: (kv - v).abs() <= 0.10,
        detail: format!("kvshift-2L acc={kv:.4} vanilla-2L acc={v:.4} |diff|={:.4} (<=0.10)", (kv - v).abs()),
    }
}

fn from_check(id: usize, name: &'static str, r: checks::CheckReport) -> Verdict {
    Verdict {
        id,
        name,
        passed: r.passed,
        detail: r.summary,
    }
}

fn th1() -> Verdict {
    let rows = checks::th1_curve(6, 8, 20, 0).unwrap();
    let mut v = from_check(5, "th1", checks::check_th1(&rows));
    let errs: Vec<String> = rows.iter().map(|r| format!("{:.3e}", r.sup_error)).collect();
    let _ = write!(v.detail, " errors=[{}]", errs.join(", "));
    v
}

fn mechanical() -> Verdict {
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    let tiny = |shift: ShiftSpec| ModelConfig {
        vocab: 16,
        layers: 2,
        attn: kvshift_core::attention::AttnConfig::new(8, 2, 1, shift),
        ffn_hidden: 12,
        ffn_enabled: true,
        max_len: 32,
        tie_embeddings: false,
        init_std: 0.3,
        norm_eps: 1e-6,
    };
    let shifts: Vec<ShiftSpec> = [ShiftVariant::Free, ShiftVariant::Clamp01, ShiftVariant::Gate]
        .into_iter()
        .flat_map(|variant| (1..=3).map(move |window| ShiftSpec { window, variant }))
        .filter(|s| s.variant != ShiftVariant::Gate || s.window == 1)
        .chain([ShiftSpec::VANILLA])
        .collect();

    // Gradients of the full model against central differences.
    let tokens = [3usize, 1, 4, 1, 5, 9, 2, 6];
    let targets: Vec<Option<usize>> = vec![Some(1), Some(4), Some(1), Some(5), None, Some(6), Some(5), None];
    let layout = Arc::new(SeqLayout::from_lengths(&[5, 3]));
    let mut worst_grad = 0.0f64;
    for &s in &shifts {
        let mut cfg = tiny(s);
        cfg.layers = 1;
        let m = Model::<f64>::build(&cfg, &mut RngStream::new(7)).unwrap();
        let params: Vec<Tensor<f64>> = m.params().into_iter().map(|p| p.2.clone()).collect();
        let rep = grad_check(
            |g, p| {
                let vars = m.record(g).rebind(p)?;
                let tr = m.forward(g, &vars, &tokens, &layout, None)?;
                g.cross_entropy(tr.logits, &targets)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        worst_grad = worst_grad.max(rep.max_rel_error);
        if !rep.passed {
            failures.push(format!("grad check {s:?}"));
        }
    }
    notes.push(format!("grad rel err {worst_grad:.1e}"));

    // Prefill against token-by-token decoding.
    let mut worst_decode = 0.0f32;
    for &s in &shifts {
        let m = Model::<f32>::build(&tiny(s), &mut RngStream::new(s.window as u64)).unwrap();
        let mut rng = RngStream::new(77);
        let toks: Vec<usize> = (0..20).map(|_| rng.below(16) as usize).collect();
        let (full, _) = m.prefill(&toks).unwrap();
        let (_, mut st) = m.prefill(&toks[..5]).unwrap();
        for (t, &tok) in toks.iter().enumerate().skip(5) {
            let row = m.step(&mut st, tok).unwrap();
            for (a, b) in row.iter().zip(&full[t * 16..(t + 1) * 16]) {
                worst_decode = worst_decode.max((a - b).abs());
            }
        }
    }
    if worst_decode > 1e-5 {
        failures.push(format!("decode diff {worst_decode:e}"));
    }
    notes.push(format!("decode diff {worst_decode:.1e}"));

    // Checkpoint round trip.
    let m = Model::<f32>::build(&ModelConfig::toy_width(2, ShiftSpec::KV_SHIFT), &mut RngStream::new(3)).unwrap();
    let adam = kvshift_core::train::AdamState::zeros_like(&m.params().iter().map(|p| p.2).collect::<Vec<_>>());
    let ck = Checkpoint {
        model: m,
        adam: Some(adam),
        rng: RngStream::at(5, 9),
        step: 42,
    };
    let bytes = encode(&ck);
    let back = decode(&bytes, Some(&ck.model.cfg)).unwrap();
    if back != ck || encode(&back) != bytes {
        failures.push("checkpoint round trip".into());
    }

    // Identity coefficients reduce to vanilla attention.
    let base = ModelConfig::toy_width(2, ShiftSpec::VANILLA);
    let van = Model::<f64>::build(&base, &mut RngStream::new(4)).unwrap();
    let mut kv = Model::<f64>::build(&ModelConfig::toy_width(2, ShiftSpec::KV_SHIFT), &mut RngStream::new(4)).unwrap();
    let kvh = kv.cfg.attn.kv_heads;
    for l in &mut kv.layers {
        l.shift = ShiftParams::fixed(kvh, [1.0, 0.0], [1.0, 0.0]);
    }
    let seqs = vec![vec![5usize, 17, 300, 5, 17], vec![9, 8, 7, 9, 8]];
    let a = van.forward_lm(&seqs).unwrap();
    let b = kv.forward_lm(&seqs).unwrap();
    let red = a.max_abs_diff(&b).unwrap();
    if red > 1e-12 {
        failures.push(format!("vanilla reduction {red:e}"));
    }
    notes.push(format!("reduction {red:.1e}"));

    // Parameter-count delta.
    for layers in [1, 2, 4] {
        let v = Model::<f32>::build(&ModelConfig::toy_depth(layers, ShiftSpec::VANILLA), &mut RngStream::new(1))
            .unwrap()
            .count_params();
        let k = Model::<f32>::build(&ModelConfig::toy_depth(layers, ShiftSpec::KV_SHIFT), &mut RngStream::new(1))
            .unwrap()
            .count_params();
        if k.total - v.total != 4 * 4 * layers {
            failures.push(format!("param delta at {layers} layers"));
        }
    }

    // Seed determinism of generators and strict training.
    for (g, p) in [
        (Generator::Induction, "paper"),
        (Generator::Ngram, "desk"),
        (Generator::Simplified, "desk"),
    ] {
        let dump = || {
            let mut out = Vec::new();
            write_dataset(g, &gen_preset(g, p).unwrap(), 50, 9, &mut out).unwrap();
            out
        };
        if dump() != dump() {
            failures.push(format!("{} generator determinism", g.name()));
        }
    }
    let mut exp = preset("fig2-width").unwrap();
    exp.arms.truncate(1);
    exp.arms[0].config.steps = 8;
    exp.arms[0].config.batch = 8;
    exp.arms[0].config.eval_every = 4;
    exp.arms[0].config.eval_samples = 32;
    let strict = RunOptions {
        reduction: Reduction::Strict,
        verbose: false,
    };
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = run_arm(&exp.arms[0], &tmp.path().join(sub), 4, None, &strict).unwrap();
        let ck = std::fs::read(&out.final_checkpoint).unwrap();
        let metrics: Vec<_> = out.metrics.into_iter().map(|r| (r.step, r.train_loss.to_bits(), r.task_acc)).collect();
        (ck, metrics)
    };
    if run("a") != run("b") {
        failures.push("strict training determinism".into());
    }

    Verdict {
        id: 9,
        name: "mechanical suite",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            notes.join(", ")
        } else {
            format!("failed: {}", failures.join("; "))
        },
    }
}

fn main() {
    // `cargo test --test acceptance -- 4 9` runs a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut all = Vec::new();
    let mut run = |id: usize, f: &dyn Fn() -> Verdict| {
        if !only.is_empty() && !only.contains(&id) {
            return;
        }
        let t = Instant::now();
        let v = f();
        report(&v);
        eprintln!("  ({:.1}s)", t.elapsed().as_secs_f64());
        all.push(v);
    };
    run(4, &|| from_check(4, "th2", checks::check_th2(100, 0).unwrap()));
    run(5, &th1);
    run(6, &|| from_check(6, "eq10", checks::check_eq10(LogitVariant::AsPrinted).unwrap()));
    run(7, &|| from_check(7, "mc", checks::check_mc(4096, 16, 1000, &checks::MC_POINTS, 0).unwrap()));
    run(8, &|| from_check(8, "property1", checks::check_property1(100, 16, 0).unwrap()));
    run(9, &mechanical);
    run(1, &|| depth(dir.path()));
    run(2, &|| width(dir.path()));
    run(3, &|| ngram(dir.path()));

    all.sort_by_key(|v| v.id);
    println!("acceptance summary:");
    for v in &all {
        report(v);
    }
    let failed: Vec<usize> = all.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!("acceptance: {} of {} criteria pass", all.len() - failed.len(), all.len());
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        if std::env::var("KVSHIFT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
