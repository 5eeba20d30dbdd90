//! Runs experiments: one metrics file and checkpoint series per arm.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvshift_core::model::Model;
use kvshift_core::train::{batch_grads, MetricRecord, TrainBatch, TrainConfig, TrainState, Trainer};
use kvshift_core::Result as CoreResult;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{LabError, Result};
use crate::formats::MetricsWriter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    pub description: String,
    /// Steps between checkpoints; the final state is always saved.
    pub checkpoint_every: u64,
    pub arms: Vec<Arm>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(LabError::Usage(format!("experiment `{}` has no arms", self.name)));
        }
        if self.checkpoint_every == 0 {
            return Err(LabError::Usage("checkpoint_every must be positive".into()));
        }
        for (i, a) in self.arms.iter().enumerate() {
            if self.arms[..i].iter().any(|b| b.name == a.name) {
                return Err(LabError::Usage(format!("duplicate arm `{}`", a.name)));
            }
            a.config.validate()?;
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Result<&Arm> {
        self.arms.iter().find(|a| a.name == name).ok_or_else(|| {
            let names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
            LabError::Usage(format!("no arm `{name}` (have {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// One graph over the whole batch.
    Strict,
    /// Sequence chunks on worker threads, summed in chunk order.
    Parallel(usize),
}

impl Reduction {
    pub fn auto() -> Self {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        if n > 1 {
            Reduction::Parallel(n)
        } else {
            Reduction::Strict
        }
    }
}

/// Loss and gradients of `batch`, reduced as requested.
pub fn reduce(model: &Model<f32>, batch: &TrainBatch, how: Reduction) -> CoreResult<(f64, Vec<Vec<f32>>)> {
    let norm = batch.counted() as f32;
    let parts = match how {
        Reduction::Strict | Reduction::Parallel(0 | 1) => return batch_grads(model, batch, norm),
        Reduction::Parallel(n) => batch.split(n),
    };
    let results: Vec<CoreResult<(f64, Vec<Vec<f32>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = parts.iter().map(|p| s.spawn(move || batch_grads(model, p, norm))).collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut loss = 0.0;
    let mut grads: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        if !l.is_finite() {
            return Ok((l, Vec::new()));
        }
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub reduction: Reduction,
    /// Print evaluation lines to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub name: String,
    pub metrics: Vec<MetricRecord>,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl ArmOutcome {
    /// `(step, accuracy)` at every evaluation.
    pub fn accuracy_curve(&self) -> Vec<(u64, f64)> {
        self.metrics.iter().filter_map(|m| m.task_acc.map(|a| (m.step, a))).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy_curve().last().map(|x| x.1)
    }

    /// First evaluated step with accuracy at least `level`.
    pub fn first_reaching(&self, level: f64) -> Option<u64> {
        self.accuracy_curve().into_iter().find(|x| x.1 >= level).map(|x| x.0)
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.kvsl")
}

pub const FINAL_CHECKPOINT: &str = "final.kvsl";
pub const LAST_GOOD_CHECKPOINT: &str = "last-good.kvsl";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn snapshot(t: &Trainer) -> Checkpoint {
    Checkpoint {
        model: t.state.model.clone(),
        adam: Some(t.state.adam.clone()),
        rng: t.state.rng,
        step: t.state.step,
    }
}

/// Trains one arm into `dir`, optionally continuing from a checkpoint. On a
/// non-finite loss the run stops with a numeric error and the checkpoints
/// already written stay in place.
pub fn run_arm(
    arm: &Arm,
    dir: &Path,
    checkpoint_every: u64,
    resume: Option<&Path>,
    opts: &RunOptions,
) -> Result<ArmOutcome> {
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let (mut trainer, mut writer) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p, Some(&arm.config.model))?;
            let adam = ck.adam.ok_or_else(|| LabError::ckpt("has_optimizer", "resuming needs optimizer moments"))?;
            let state = TrainState {
                model: ck.model,
                adam,
                step: ck.step,
                rng: ck.rng,
            };
            if state.rng.seed != arm.config.seed {
                return Err(LabError::ckpt("rng_seed", "checkpoint seed differs from the run config seed"));
            }
            let w = MetricsWriter::resume(&metrics_path, ck.step)?;
            (Trainer::from_state(arm.config.clone(), state)?, w)
        }
        None => (Trainer::new(arm.config.clone())?, MetricsWriter::create(&metrics_path)?),
    };
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    while !trainer.is_done() {
        let how = opts.reduction;
        let mut rec = match trainer.step(|m, b| reduce(m, b, how)) {
            Ok(r) => r,
            Err(e) => {
                // The failed step leaves the state untouched.
                if matches!(e, kvshift_core::Error::Numeric { .. }) {
                    checkpoint::save(&snapshot(&trainer), &dir.join(LAST_GOOD_CHECKPOINT))?;
                }
                return Err(e.into());
            }
        };
        if trainer.eval_due() {
            let e = trainer.evaluate()?;
            rec.eval_loss = Some(e.loss);
            rec.task_acc = Some(e.accuracy);
            if opts.verbose {
                eprintln!(
                    "[{}] step {} loss {:.4} eval {:.4} acc {:.4}",
                    arm.name, rec.step, rec.train_loss, e.loss, e.accuracy
                );
            }
        }
        rec.wall_ms = start.elapsed().as_millis() as u64;
        writer.append(&rec)?;
        metrics.push(rec);
        if trainer.state.step % checkpoint_every == 0 && !trainer.is_done() {
            let p = dir.join(checkpoint_name(trainer.state.step));
            checkpoint::save(&snapshot(&trainer), &p)?;
            checkpoints.push(p);
        }
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&snapshot(&trainer), &final_checkpoint)?;
    Ok(ArmOutcome {
        name: arm.name.clone(),
        metrics,
        final_checkpoint,
        checkpoints,
    })
}

/// Runs every arm (or only `only`) into `dir/<arm>`.
pub fn run_experiment(exp: &Experiment, dir: &Path, only: Option<&str>, opts: &RunOptions) -> Result<Vec<ArmOutcome>> {
    exp.validate()?;
    let arms: Vec<&Arm> = match only {
        Some(n) => vec![exp.arm(n)?],
        None => exp.arms.iter().collect(),
    };
    arms.into_iter()
        .map(|a| run_arm(a, &dir.join(&a.name), exp.checkpoint_every, None, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use kvshift_core::attention::ShiftSpec;
    use kvshift_core::model::ModelConfig;
    use kvshift_core::tasks::InductionParams;
    use kvshift_core::train::{LossPositions, Task, TaskConfig};
    use kvshift_core::RngStream;

    #[test]
    fn parallel_reduction_matches_strict() {
        let model = Model::<f32>::build(&ModelConfig::toy_depth(2, ShiftSpec::KV_SHIFT), &mut RngStream::new(2)).unwrap();
        let task = Task::new(TaskConfig::Induction(InductionParams::DESK), &mut RngStream::new(3)).unwrap();
        let batch = task.train_batch(&mut RngStream::new(4), 8, LossPositions::AllTokens).unwrap();
        let (strict, gs) = reduce(&model, &batch, Reduction::Strict).unwrap();
        for n in [2, 3, 8] {
            let (fast, gf) = reduce(&model, &batch, Reduction::Parallel(n)).unwrap();
            assert!((fast - strict).abs() <= 1e-6, "{n} workers: {fast} vs {strict}");
            let worst = gs
                .iter()
                .flatten()
                .zip(gf.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst < 1e-5, "{n} workers: grad diff {worst}");
        }
    }
}
