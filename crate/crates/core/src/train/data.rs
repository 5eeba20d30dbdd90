//! Training batches and held-out evaluation sets for each task.

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout};
use crate::model::Model;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tasks::{argmax, gen_induction_sequence, gen_ngram_batch, InductionParams, NgramTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskConfig {
    Induction(InductionParams),
    Ngram {
        vocab: usize,
        table_size: usize,
        seq_len: usize,
    },
}

impl TaskConfig {
    /// Smallest model vocabulary that covers every emitted id.
    pub fn vocab_needed(&self) -> usize {
        match self {
            TaskConfig::Induction(p) => p.max_val,
            TaskConfig::Ngram { vocab, .. } => *vocab,
        }
    }
}

/// Which rows of a training sequence carry a next-token loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Every non-pad row with a successor.
    AllTokens,
    /// Only the rows the task scores (induction predict positions, 3-gram
    /// table hits).
    Scored,
}

/// A task instance; the n-gram table is drawn once from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub cfg: TaskConfig,
    pub table: Option<NgramTable>,
}

/// Packed sequences with one optional next-token target per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl TrainBatch {
    fn push(&mut self, seq: &[usize], scored: Option<&[usize]>) {
        self.tokens.extend_from_slice(seq);
        self.lengths.push(seq.len());
        self.targets.extend((0..seq.len()).map(|i| match scored {
            Some(rows) if !rows.contains(&i) => None,
            _ => seq.get(i + 1).copied(),
        }));
    }

    pub fn counted(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Splits into at most `parts` batches of whole sequences, in order.
    pub fn split(&self, parts: usize) -> Vec<TrainBatch> {
        let n = self.lengths.len();
        let per = n.div_ceil(parts.max(1)).max(1);
        let mut out = Vec::new();
        let mut row = 0;
        for chunk in self.lengths.chunks(per) {
            let rows: usize = chunk.iter().sum();
            out.push(TrainBatch {
                tokens: self.tokens[row..row + rows].to_vec(),
                lengths: chunk.to_vec(),
                targets: self.targets[row..row + rows].to_vec(),
            });
            row += rows;
        }
        out
    }
}

/// Packed held-out sequences and the rows that are scored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSet {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Per sequence: `(row within the sequence, target)`.
    pub scored: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

impl Task {
    pub fn new(cfg: TaskConfig, rng: &mut RngStream) -> Result<Self> {
        let table = match &cfg {
            TaskConfig::Induction(p) => {
                p.validate()?;
                None
            }
            TaskConfig::Ngram {
                vocab,
                table_size,
                seq_len,
            } => {
                if *seq_len < 3 {
                    return Err(Error::config("n-gram seq_len must be >= 3"));
                }
                Some(NgramTable::generate(rng, *table_size, *vocab)?)
            }
        };
        Ok(Self { cfg, table })
    }

    /// Training sequences: the non-pad part of each sample, with targets at
    /// the rows `loss` selects.
    pub fn train_batch(&self, rng: &mut RngStream, batch: usize, loss: LossPositions) -> Result<TrainBatch> {
        let mut out = TrainBatch::default();
        let all = loss == LossPositions::AllTokens;
        match (&self.cfg, &self.table) {
            (TaskConfig::Induction(p), _) => {
                for _ in 0..batch {
                    let s = gen_induction_sequence(rng, p)?;
                    let rows = (!all).then_some(&s.predict_positions[..]);
                    out.push(&s.tokens[..s.content_len()], rows);
                }
            }
            (TaskConfig::Ngram { seq_len, .. }, Some(t)) => {
                let b = gen_ngram_batch(t, rng, batch, *seq_len)?;
                for (seq, pos) in b.tokens.iter().zip(&b.score_positions) {
                    out.push(seq, (!all).then_some(&pos[..]));
                }
            }
            _ => return Err(Error::contract("n-gram task without a table")),
        }
        Ok(out)
    }

    pub fn eval_set(&self, rng: &mut RngStream, count: usize) -> Result<EvalSet> {
        let mut out = EvalSet::default();
        match (&self.cfg, &self.table) {
            (TaskConfig::Induction(p), _) => {
                for _ in 0..count {
                    let s = gen_induction_sequence(rng, p)?;
                    let n = s.content_len();
                    out.tokens.extend_from_slice(&s.tokens[..n]);
                    out.lengths.push(n);
                    out.scored.push(s.targets().collect());
                }
            }
            (TaskConfig::Ngram { seq_len, .. }, Some(t)) => {
                let b = gen_ngram_batch(t, rng, count, *seq_len)?;
                for (seq, pos) in b.tokens.iter().zip(&b.score_positions) {
                    out.tokens.extend_from_slice(seq);
                    out.lengths.push(seq.len());
                    out.scored.push(pos.iter().map(|&p| (p, seq[p + 1])).collect());
                }
            }
            _ => return Err(Error::contract("n-gram task without a table")),
        }
        Ok(out)
    }
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Loss and argmax accuracy at the scored rows; the head is evaluated
    /// only there.
    pub fn evaluate<F: Real>(&self, model: &Model<F>, chunk: usize) -> Result<EvalMetrics> {
        let (mut loss, mut hits, mut count) = (0.0f64, 0usize, 0usize);
        let v = model.cfg.vocab;
        let mut start_seq = 0;
        let mut row0 = 0;
        while start_seq < self.lengths.len() {
            let end = (start_seq + chunk.max(1)).min(self.lengths.len());
            let lens = &self.lengths[start_seq..end];
            let rows: usize = lens.iter().sum();
            let mut sel = Vec::new();
            let mut targets = Vec::new();
            let mut off = 0;
            for (k, &len) in lens.iter().enumerate() {
                for &(p, t) in &self.scored[start_seq + k] {
                    sel.push(off + p);
                    targets.push(t);
                }
                off += len;
            }
            if !sel.is_empty() {
                let layout = Arc::new(SeqLayout::from_lengths(lens));
                let mut g = Graph::new();
                let vars = model.record(&mut g);
                let tr = model.forward(&mut g, &vars, &self.tokens[row0..row0 + rows], &layout, Some(&sel))?;
                let logits = g.value(tr.logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &logits[r * v..(r + 1) * v];
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.f64()));
                    let z: f64 = row.iter().map(|&x| libm::exp(x.f64() - m)).sum();
                    loss += m + libm::log(z) - row[t].f64();
                    hits += usize::from(argmax(row) == t);
                }
                count += targets.len();
            }
            row0 += rows;
            start_seq = end;
        }
        if count == 0 {
            return Err(Error::contract("evaluation set has no scored positions"));
        }
        Ok(EvalMetrics {
            loss: loss / count as f64,
            accuracy: hits as f64 / count as f64,
            count,
        })
    }
}
