//! The `kvshift` command line.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use kvshift_core::model::Model;
use kvshift_core::tasks::InductionParams;
use kvshift_core::theory::{gd_trajectory, ih_model, shift_param_quadrant_census, IhParams, LogitVariant};
use kvshift_core::train::{held_out, TaskConfig};
use kvshift_core::RngStream;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::checks::{self, CheckReport};
use crate::dataset::{self, Generator, NGRAM_DESK};
use crate::error::{LabError, Result};
use crate::formats::{write_error_curve_csv, write_json, write_landscape_csv};
use crate::output::{out_root, DirLock, RunManifest, MANIFEST_FILE};
use crate::presets::load_experiment;
use crate::runner::{run_arm, Experiment, Reduction, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "kvshift", version, about = "KV shifting attention laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Write a synthetic dataset dump.
    GenData(GenDataArgs),
    /// Train every arm of an experiment preset or config file.
    Train(TrainArgs),
    /// Run a numerical check and write its results.
    Theory(TheoryArgs),
    /// Evaluate a checkpoint on a held-out task set.
    Eval(EvalArgs),
    /// Count KV heads by the signs of α₁ − α₂ and β₁ − β₂.
    Census(CensusArgs),
    /// Repeat the command recorded in a manifest (training runs strict).
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenTask {
    Induction,
    Ngram,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: GenTask,
    /// `desk` for every task, `paper` for induction.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (default `<root>/data/<task>-<preset>-seed<seed>.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Preset name (fig1-depth, fig2-width, fig4-ngram, fig7-variants,
    /// fig7-ablations) or a JSON experiment or train config file.
    #[arg(long)]
    pub config: String,
    /// Train only this arm.
    #[arg(long)]
    pub arm: Option<String>,
    /// Continue the selected arm from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Fixed-order single-graph gradient reduction.
    #[arg(long)]
    pub strict: bool,
    /// Worker threads for the fast reduction (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override the step budget of every arm.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryCheck {
    Th1,
    Th2,
    Eq10,
    Landscape,
    Mc,
    Property1,
    LogitTable,
}

impl TheoryCheck {
    fn name(self) -> &'static str {
        match self {
            TheoryCheck::Th1 => "th1",
            TheoryCheck::Th2 => "th2",
            TheoryCheck::Eq10 => "eq10",
            TheoryCheck::Landscape => "landscape",
            TheoryCheck::Mc => "mc",
            TheoryCheck::Property1 => "property1",
            TheoryCheck::LogitTable => "logit-table",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    AsPrinted,
    InTextDerivation,
}

impl From<VariantArg> for LogitVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::AsPrinted => LogitVariant::AsPrinted,
            VariantArg::InTextDerivation => LogitVariant::InTextDerivation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct TheoryArgs {
    #[arg(long, value_enum)]
    pub check: TheoryCheck,
    #[arg(long, default_value_t = 0.0)]
    pub ot: f64,
    /// Grid points per axis for the landscape.
    #[arg(long, default_value_t = 101)]
    pub resolution: usize,
    /// Logit table variant for eq10 and landscape (default as-printed).
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Embedding dimension (th1: 8, mc and logit-table: 4096).
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "T", default_value_t = 16)]
    pub t: usize,
    /// Monte Carlo samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Probes (th2), matrix pairs (property1) or probes per length (th1, default 20).
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long, default_value_t = 6)]
    pub p1_max: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2,3")]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,4")]
    pub beta: Vec<f64>,
    /// Also record a gradient-descent path from `α₁,β₁` (landscape).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gd_start: Option<Vec<f64>>,
    #[arg(long, default_value_t = 200)]
    pub gd_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub gd_step_size: f64,
    /// Let the descent path leave the unit square.
    #[arg(long)]
    pub gd_free: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default `<root>/theory-<check>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// induction-desk, induction-paper or ngram-desk.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 2048)]
    pub count: usize,
    /// Seed of the held-out set; for n-gram tasks it also fixes the table,
    /// so pass the training seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Result file (default `<root>/eval/<checkpoint>-<task>.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct CensusArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Result file (default `<root>/census/<checkpoint>.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this location instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval_task(name: &str) -> Result<TaskConfig> {
    match name {
        "induction-desk" => Ok(TaskConfig::Induction(InductionParams::DESK)),
        "induction-paper" => Ok(TaskConfig::Induction(InductionParams::PAPER)),
        "ngram-desk" => Ok(TaskConfig::Ngram {
            vocab: NGRAM_DESK.vocab,
            table_size: NGRAM_DESK.table_size,
            seq_len: NGRAM_DESK.seq_len,
        }),
        _ => Err(LabError::Usage(format!(
            "unknown eval task `{name}` (induction-desk, induction-paper, ngram-desk)"
        ))),
    }
}

/// Induction parameters of the model `kvshift theory --check th2` writes.
pub const TH2_MODEL_TASK: InductionParams = InductionParams::DESK;
pub const TH2_MODEL_PARAMS: IhParams = IhParams { sigma: 0.05, slope: 0.01 };

fn file_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn command_json(cmd: &Command) -> serde_json::Value {
    serde_json::to_value(cmd).expect("commands serialize")
}

/// Runs one command; outcome lines go to stdout.
pub fn run(cmd: Command) -> Result<()> {
    match &cmd {
        Command::GenData(a) => gen_data(&cmd, a),
        Command::Train(a) => train(&cmd, a),
        Command::Theory(a) => theory(&cmd, a),
        Command::Eval(a) => eval(&cmd, a),
        Command::Census(a) => census(&cmd, a),
        Command::Rerun(a) => rerun(a),
    }
}

fn gen_data(cmd: &Command, a: &GenDataArgs) -> Result<()> {
    let g = match a.task {
        GenTask::Induction => Generator::Induction,
        GenTask::Ngram => Generator::Ngram,
        GenTask::Simplified => Generator::Simplified,
    };
    let params = dataset::gen_preset(g, &a.preset)?;
    let out = a.out.clone().unwrap_or_else(|| {
        out_root().join("data").join(format!("{}-{}-seed{}.jsonl", g.name(), a.preset, a.seed))
    });
    let _lock = DirLock::acquire(&parent_dir(&out))?;
    let mut manifest = RunManifest::start("gen-data", command_json(cmd));
    manifest.config = json!({ "generator": g.name(), "params": params, "count": a.count });
    manifest.seed = Some(a.seed);
    let f = fs::File::create(&out).map_err(LabError::io(&out))?;
    let mut w = BufWriter::new(f);
    dataset::write_dataset(g, &params, a.count, a.seed, &mut w)?;
    std::io::Write::flush(&mut w).map_err(LabError::io(&out))?;
    manifest.artifacts.push(out.clone());
    manifest.finish(&file_manifest(&out))?;
    println!("wrote {} samples to {}", a.count, out.display());
    Ok(())
}

fn train(cmd: &Command, a: &TrainArgs) -> Result<()> {
    train_experiment(cmd, a, load_experiment(&a.config)?)
}

fn train_experiment(cmd: &Command, a: &TrainArgs, mut exp: Experiment) -> Result<()> {
    if let Some(s) = a.steps {
        exp.arms.iter_mut().for_each(|arm| arm.config.steps = s);
    }
    if let Some(name) = &a.arm {
        exp.arms = vec![exp.arm(name)?.clone()];
    }
    if a.resume.is_some() && exp.arms.len() != 1 {
        return Err(LabError::Usage("--resume needs a single-arm experiment or --arm".into()));
    }
    exp.validate()?;
    let dir = a.out_dir.clone().unwrap_or_else(|| out_root().join(&exp.name));
    let _lock = DirLock::acquire(&dir)?;
    let mut manifest = RunManifest::start("train", command_json(cmd));
    manifest.config = serde_json::to_value(&exp)?;
    manifest.seed = exp.arms.first().map(|arm| arm.config.seed);
    let reduction = match (a.strict, a.threads) {
        (true, _) => Reduction::Strict,
        (false, Some(n)) => Reduction::Parallel(n),
        (false, None) => Reduction::auto(),
    };
    let opts = RunOptions {
        reduction,
        verbose: !a.quiet,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    for arm in &exp.arms {
        let arm_dir = dir.join(&arm.name);
        let res = run_arm(arm, &arm_dir, exp.checkpoint_every, a.resume.as_deref(), &opts);
        let out = match res {
            Ok(o) => o,
            Err(e) => {
                manifest.artifacts.push(arm_dir);
                manifest.finish(&manifest_path)?;
                return Err(e);
            }
        };
        manifest.artifacts.push(arm_dir.join(crate::runner::METRICS_FILE));
        manifest.artifacts.extend(out.checkpoints.iter().cloned());
        manifest.artifacts.push(out.final_checkpoint.clone());
        let acc = out.final_accuracy().map_or("n/a".into(), |x| format!("{x:.4}"));
        println!("{}: final accuracy {acc}", arm.name);
    }
    manifest.finish(&manifest_path)
}

fn parse_pair(v: &[f64], flag: &str) -> Result<[f64; 2]> {
    match v {
        [a, b] => Ok([*a, *b]),
        _ => Err(LabError::Usage(format!("--{flag} takes two comma-separated values"))),
    }
}

fn theory(cmd: &Command, a: &TheoryArgs) -> Result<()> {
    let dir = a.out.clone().unwrap_or_else(|| out_root().join(format!("theory-{}", a.check.name())));
    let _lock = DirLock::acquire(&dir)?;
    let mut manifest = RunManifest::start("theory", command_json(cmd));
    manifest.seed = Some(a.seed);
    let mut artifacts = Vec::new();
    let report: CheckReport = match a.check {
        TheoryCheck::Th2 => {
            let r = checks::check_th2(a.probes.unwrap_or(100), a.seed)?;
            let model = ih_model(TH2_MODEL_TASK.max_val, TH2_MODEL_TASK.length, &TH2_MODEL_PARAMS)?;
            let p = dir.join("th2-model.kvsl");
            checkpoint::save(
                &Checkpoint {
                    model,
                    adam: None,
                    rng: RngStream::new(0),
                    step: 0,
                },
                &p,
            )?;
            artifacts.push(p);
            r
        }
        TheoryCheck::Th1 => {
            let rows = checks::th1_curve(a.p1_max, a.d.unwrap_or(8), a.probes.unwrap_or(20), a.seed)?;
            let p = dir.join("th1-error-curve.csv");
            write_error_curve_csv(&p, &rows)?;
            artifacts.push(p);
            checks::check_th1(&rows)
        }
        TheoryCheck::Eq10 => checks::check_eq10(a.variant.map_or(LogitVariant::AsPrinted, Into::into))?,
        TheoryCheck::Landscape => {
            let variants = vec![a.variant.map_or(LogitVariant::AsPrinted, Into::into)];
            let pts = checks::landscape(a.resolution, a.ot, &variants)?;
            let p = dir.join("landscape.csv");
            write_landscape_csv(&p, &pts)?;
            artifacts.push(p);
            let mut paths = Vec::new();
            if let Some(start) = &a.gd_start {
                let s = parse_pair(start, "gd-start")?;
                for &v in &variants {
                    paths.push(json!({
                        "variant": v.name(),
                        "trajectory": gd_trajectory((s[0], s[1]), a.ot, a.gd_step_size, a.gd_steps, v, !a.gd_free)?,
                    }));
                }
                let p = dir.join("gd-trajectories.json");
                write_json(&p, &paths)?;
                artifacts.push(p);
            }
            let expected = a.resolution * a.resolution * variants.len();
            let finite = pts.iter().all(|p| p.loss.is_finite());
            let best = pts.iter().min_by(|x, y| x.loss.total_cmp(&y.loss));
            CheckReport {
                check: "landscape".into(),
                passed: pts.len() == expected && finite,
                summary: format!(
                    "rows={} expected={expected} min at ({:.4},{:.4})",
                    pts.len(),
                    best.map_or(f64::NAN, |b| b.alpha1),
                    best.map_or(f64::NAN, |b| b.beta1)
                ),
                details: json!({ "rows": pts.len(), "ot": a.ot, "resolution": a.resolution }),
            }
        }
        TheoryCheck::Mc => {
            let d = a.d.unwrap_or(4096);
            checks::check_mc(d, a.t, a.n, &checks::MC_POINTS, a.seed)?
        }
        TheoryCheck::Property1 => checks::check_property1(a.probes.unwrap_or(100), 16, a.seed)?,
        TheoryCheck::LogitTable => {
            let d = a.d.unwrap_or(4096);
            checks::check_logit_table(parse_pair(&a.alpha, "alpha")?, parse_pair(&a.beta, "beta")?, d, a.t, a.n, a.seed)?
        }
    };
    let p = dir.join(format!("{}.json", a.check.name()));
    write_json(&p, &report)?;
    artifacts.push(p);
    manifest.config = serde_json::to_value(a)?;
    manifest.artifacts = artifacts;
    manifest.finish(&dir.join(MANIFEST_FILE))?;
    println!("{}", report.line());
    if report.passed {
        Ok(())
    } else {
        Err(LabError::CheckFailed(report.summary))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

/// Checks that a model can read every sequence of a task.
pub fn check_model_fits(model: &Model<f32>, task: &TaskConfig) -> Result<()> {
    let len = match task {
        TaskConfig::Induction(p) => p.length,
        TaskConfig::Ngram { seq_len, .. } => *seq_len,
    };
    if model.cfg.vocab < task.vocab_needed() {
        return Err(LabError::ckpt(
            "config",
            format!("model vocab {} is smaller than the task's {}", model.cfg.vocab, task.vocab_needed()),
        ));
    }
    if model.cfg.max_len < len {
        return Err(LabError::ckpt(
            "config",
            format!("model max_len {} is shorter than the task's {len}", model.cfg.max_len),
        ));
    }
    Ok(())
}

fn eval(cmd: &Command, a: &EvalArgs) -> Result<()> {
    let task = eval_task(&a.task)?;
    let ck = checkpoint::load(&a.ckpt, None)?;
    check_model_fits(&ck.model, &task)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("eval").join(format!("{}-{}.json", stem(&a.ckpt), a.task)));
    let _lock = DirLock::acquire(&parent_dir(&out))?;
    let mut manifest = RunManifest::start("eval", command_json(cmd));
    manifest.config = json!({ "task": task, "count": a.count, "checkpoint": a.ckpt });
    manifest.seed = Some(a.seed);
    let (_, set) = held_out(&task, a.seed, a.count)?;
    let m = set.evaluate(&ck.model, 64)?;
    write_json(&out, &m)?;
    manifest.artifacts.push(out.clone());
    manifest.finish(&file_manifest(&out))?;
    println!("loss {:.6} accuracy {:.6} count {}", m.loss, m.accuracy, m.count);
    Ok(())
}

fn census(cmd: &Command, a: &CensusArgs) -> Result<()> {
    let ck = checkpoint::load(&a.ckpt, None)?;
    let c = shift_param_quadrant_census(&ck.model)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("census").join(format!("{}.json", stem(&a.ckpt))));
    let _lock = DirLock::acquire(&parent_dir(&out))?;
    let mut manifest = RunManifest::start("census", command_json(cmd));
    manifest.config = json!({ "checkpoint": a.ckpt });
    write_json(&out, &json!({ "census": c, "total": c.total() }))?;
    manifest.artifacts.push(out.clone());
    manifest.finish(&file_manifest(&out))?;
    println!(
        "alpha<=,beta<= {}  alpha<=,beta> {}  alpha>,beta<= {}  alpha>,beta> {}  total {}",
        c.alpha_le_beta_le,
        c.alpha_le_beta_gt,
        c.alpha_gt_beta_le,
        c.alpha_gt_beta_gt,
        c.total()
    );
    Ok(())
}

fn rerun(a: &RerunArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    let mut cmd: Command = serde_json::from_value(m.command)?;
    let out = a.out.clone();
    match &mut cmd {
        Command::GenData(x) => x.out = out.or(x.out.take()),
        Command::Train(x) => {
            x.strict = true;
            x.out_dir = out.or(x.out_dir.take());
            let exp: Experiment = serde_json::from_value(m.config)?;
            let cmd = Command::Train(x.clone());
            return train_experiment(&cmd, x, exp);
        }
        Command::Theory(x) => x.out = out.or(x.out.take()),
        Command::Eval(x) => x.out = out.or(x.out.take()),
        Command::Census(x) => x.out = out.or(x.out.take()),
        Command::Rerun(_) => return Err(LabError::Usage("a manifest cannot record a rerun".into())),
    }
    run(cmd)
}
