//! The training loop proper.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_global_norm, lr_at, AdamConfig, AdamParam, AdamState, EvalMetrics, EvalSet, LossPositions, Task, TaskConfig, TrainBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout};
use crate::model::{Model, ModelConfig};
use crate::rng::RngStream;

const STREAM_MODEL: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TASK: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub loss_positions: LossPositions,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_samples: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Also decay normalization gains and shift coefficients.
    pub decay_all: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr_peak > 0.0) {
            return Err(Error::config("lr_peak must be positive"));
        }
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::config("batch and eval_every must be positive"));
        }
        if self.model.vocab < self.task.vocab_needed() {
            return Err(Error::config(format!(
                "model vocab {} is smaller than the task's {}",
                self.model.vocab,
                self.task.vocab_needed()
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub rng: RngStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub eval_loss: Option<f64>,
    pub task_acc: Option<f64>,
    pub wall_ms: u64,
}

/// Mean next-token loss of `batch` with every sum divided by `norm`, and
/// the gradient of each parameter in [`Model::params`] order.
pub fn batch_grads(model: &Model<f32>, batch: &TrainBatch, norm: f32) -> Result<(f64, Vec<Vec<f32>>)> {
    let layout = Arc::new(SeqLayout::from_lengths(&batch.lengths));
    let mut g = Graph::new();
    let vars = model.record(&mut g);
    let rows: Vec<usize> = (0..batch.targets.len()).filter(|&r| batch.targets[r].is_some()).collect();
    let targets: Vec<Option<usize>> = rows.iter().map(|&r| batch.targets[r]).collect();
    let tr = model.forward(&mut g, &vars, &batch.tokens, &layout, Some(&rows))?;
    let loss = g.cross_entropy_sum(tr.logits, &targets, norm)?;
    let value = g.scalar_value(loss) as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = vars
        .all()
        .into_iter()
        .map(|v| g.grad(v).map_or_else(|| alloc::vec![0.0; g.value(v).len()], <[f32]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// The task and held-out set a run with `seed` trains and evaluates on.
pub fn held_out(task: &TaskConfig, seed: u64, count: usize) -> Result<(Task, EvalSet)> {
    let rng = RngStream::new(seed);
    let task = Task::new(task.clone(), &mut rng.derive(STREAM_TASK))?;
    let eval = task.eval_set(&mut rng.derive(STREAM_EVAL), count)?;
    Ok((task, eval))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub task: Task,
    pub eval: EvalSet,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = RngStream::new(cfg.seed);
        let model = Model::build(&cfg.model, &mut rng.derive(STREAM_MODEL))?;
        let adam = AdamState::zeros_like(&model.params().iter().map(|p| p.2).collect::<Vec<_>>());
        Self::from_state(
            cfg,
            TrainState {
                model,
                adam,
                step: 0,
                rng,
            },
        )
    }

    /// Continues from a saved state; the task and evaluation set are
    /// re-derived from the seed.
    pub fn from_state(cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.model.cfg != cfg.model {
            return Err(Error::config("checkpoint model config does not match the run config"));
        }
        let (task, eval) = held_out(&cfg.task, state.rng.seed, cfg.eval_samples)?;
        Ok(Self { cfg, task, eval, state })
    }

    /// The batch used at `step` (a pure function of seed and step).
    pub fn batch_at(&self, step: u64) -> Result<TrainBatch> {
        let mut rng = self.state.rng.derive(STREAM_TRAIN).derive(step);
        self.task.train_batch(&mut rng, self.cfg.batch, self.cfg.loss_positions)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// One optimizer step. `reduce` returns the batch loss and gradients
    /// (see [`batch_grads`]).
    pub fn step(&mut self, reduce: impl FnOnce(&Model<f32>, &TrainBatch) -> Result<(f64, Vec<Vec<f32>>)>) -> Result<MetricRecord> {
        let step = self.state.step;
        let batch = self.batch_at(step)?;
        let (loss, mut grads) = reduce(&self.state.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                location: format!("training loss at step {step}"),
            });
        }
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let lr = lr_at(step, self.cfg.lr_peak, self.cfg.warmup_steps);
        let meta: Vec<(String, bool)> = self
            .state
            .model
            .params()
            .into_iter()
            .map(|(n, k, _)| (n, self.cfg.decay_all || k.decays()))
            .collect();
        if grads.len() != meta.len() {
            return Err(Error::contract("gradient list does not match the parameter list"));
        }
        let mut params: Vec<AdamParam<'_, f32>> = self
            .state
            .model
            .params_mut()
            .into_iter()
            .zip(meta)
            .zip(&grads)
            .map(|((value, (name, decay)), grad)| AdamParam {
                name,
                value,
                grad,
                decay,
            })
            .collect();
        adamw_step(&mut params, &mut self.state.adam, &self.cfg.adam, lr)?;
        self.state.model.constrain();
        self.state.step += 1;
        Ok(MetricRecord {
            step: self.state.step,
            train_loss: loss,
            lr,
            grad_norm,
            eval_loss: None,
            task_acc: None,
            wall_ms: 0,
        })
    }

    /// Single-graph step with a fixed reduction order.
    pub fn step_strict(&mut self) -> Result<MetricRecord> {
        self.step(|m, b| batch_grads(m, b, b.counted() as f32))
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        self.eval.evaluate(&self.state.model, 256)
    }

    /// Whether an evaluation is due after the step just taken.
    pub fn eval_due(&self) -> bool {
        self.state.step.is_multiple_of(self.cfg.eval_every) || self.is_done()
    }
}
