//! Synthetic data: induction sequences, 3-gram sequences and the
//! single-repeat sequences of the simplified induction model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngStream;

/// Resamples allowed per sequence before giving up.
pub const MAX_RETRIES: usize = 1000;

pub const PAD: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionParams {
    pub length: usize,
    pub mid_val: usize,
    pub max_val: usize,
}

impl InductionParams {
    pub const PAPER: Self = Self {
        length: 512,
        mid_val: 10,
        max_val: 8000,
    };
    pub const DESK: Self = Self {
        length: 128,
        mid_val: 10,
        max_val: 512,
    };

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.max_val < self.mid_val + 1 + self.length {
            return Err(Error::config(format!(
                "induction needs max_val - mid_val - 1 >= length >= 2 (got {:?})",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionSample {
    pub tokens: Vec<usize>,
    pub predict_positions: Vec<usize>,
}

impl InductionSample {
    /// Number of tokens before the pad suffix.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }

    /// `(position, expected next token)` pairs that are scored.
    pub fn targets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.predict_positions.iter().map(|&p| (p, self.tokens[p + 1]))
    }
}

/// Draws from `length` shuffled candidates in `(mid_val, max_val)`, never
/// repeating the previous token. The first repeated token `A` is followed by
/// the successor it had before, the rest is padded with zeros, and the
/// repeat's position is the only predict position.
pub fn gen_induction_sequence(rng: &mut RngStream, p: &InductionParams) -> Result<InductionSample> {
    p.validate()?;
    let mut pool: Vec<usize> = (p.mid_val + 1..p.max_val).collect();
    for _ in 0..MAX_RETRIES {
        rng.shuffle(&mut pool);
        let cand = &pool[..p.length];
        let mut tokens: Vec<usize> = Vec::with_capacity(p.length);
        let mut next: BTreeMap<usize, Option<usize>> = BTreeMap::new();
        while tokens.len() < p.length {
            let x = cand[rng.below(cand.len() as u64) as usize];
            if tokens.last() == Some(&x) {
                continue;
            }
            match next.get(&x) {
                None => {
                    if let Some(&last) = tokens.last() {
                        next.insert(last, Some(x));
                    }
                    next.insert(x, None);
                    tokens.push(x);
                }
                Some(succ) => {
                    if tokens.len() + 2 > p.length {
                        break;
                    }
                    let b = succ.expect("a non-final token has a successor");
                    let pos = tokens.len();
                    tokens.extend([x, b]);
                    tokens.resize(p.length, PAD);
                    return Ok(InductionSample {
                        tokens,
                        predict_positions: vec![pos],
                    });
                }
            }
        }
    }
    Err(Error::GeneratorExhausted(MAX_RETRIES))
}

/// Checks every structural property of an induction sample.
pub fn check_induction_sample(s: &InductionSample, p: &InductionParams) -> core::result::Result<(), &'static str> {
    if s.tokens.len() != p.length {
        return Err("wrong length");
    }
    let n = s.content_len();
    if s.tokens[..n].iter().any(|&t| t <= p.mid_val || t >= p.max_val) {
        return Err("token outside (mid_val, max_val)");
    }
    if s.predict_positions.len() != 1 {
        return Err("expected exactly one predict position");
    }
    let pos = s.predict_positions[0];
    if pos + 2 != n {
        return Err("predict position is not the repeated token");
    }
    let prefix = &s.tokens[..pos];
    if prefix.windows(2).any(|w| w[0] == w[1]) || s.tokens[pos - 1] == s.tokens[pos] {
        return Err("immediate repeat");
    }
    let mut sorted = prefix.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err("prefix tokens not distinct");
    }
    match prefix.iter().position(|&t| t == s.tokens[pos]) {
        Some(q) if s.tokens[q + 1] == s.tokens[pos + 1] => {}
        Some(_) => return Err("successor does not match"),
        None => return Err("repeated token never occurred"),
    }
    // For all i < j with equal tokens, their successors agree.
    for j in 0..n - 1 {
        for i in 0..j {
            if s.tokens[i] == s.tokens[j] && s.tokens[i + 1] != s.tokens[j + 1] {
                return Err("induction property violated");
            }
        }
    }
    Ok(())
}

/// Fixed `(x₁, x₂) → x₃` lookup with unique pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramTable {
    pub triples: Vec<[usize; 3]>,
}

impl NgramTable {
    pub const DEFAULT_SIZE: usize = 200;

    /// `size` distinct pairs over ids `1..vocab`, each with a uniform `x₃`.
    pub fn generate(rng: &mut RngStream, size: usize, vocab: usize) -> Result<Self> {
        if vocab < 3 || size == 0 || size > (vocab - 1) * (vocab - 1) {
            return Err(Error::config(format!("cannot draw {size} distinct pairs from vocab {vocab}")));
        }
        let mut seen = BTreeMap::new();
        let mut triples = Vec::with_capacity(size);
        let id = |rng: &mut RngStream| 1 + rng.below(vocab as u64 - 1) as usize;
        while triples.len() < size {
            let (a, b) = (id(rng), id(rng));
            if seen.contains_key(&(a, b)) {
                continue;
            }
            let c = id(rng);
            seen.insert((a, b), c);
            triples.push([a, b, c]);
        }
        Ok(Self { triples })
    }

    pub fn lookup(&self) -> BTreeMap<(usize, usize), usize> {
        self.triples.iter().map(|t| ((t[0], t[1]), t[2])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramBatch {
    pub tokens: Vec<Vec<usize>>,
    /// Rows whose next token is a table `x₃` (the row holds `x₂`).
    pub score_positions: Vec<Vec<usize>>,
}

/// Concatenates uniformly drawn triples, truncated to `seq_len`. A triple is
/// redrawn if gluing it on would create a table pair followed by a token
/// other than its `x₃`, so every scored position is consistent.
pub fn gen_ngram_batch(table: &NgramTable, rng: &mut RngStream, batch: usize, seq_len: usize) -> Result<NgramBatch> {
    if table.triples.is_empty() {
        return Err(Error::config("empty n-gram table"));
    }
    if seq_len < 3 {
        return Err(Error::config("n-gram sequences need seq_len >= 3"));
    }
    let map = table.lookup();
    let mut out = NgramBatch {
        tokens: Vec::with_capacity(batch),
        score_positions: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let mut t: Vec<usize> = Vec::with_capacity(seq_len + 2);
        while t.len() < seq_len {
            let mut tries = 0;
            let tri = loop {
                let tri = table.triples[rng.below(table.triples.len() as u64) as usize];
                if fits(&map, &t, &tri) {
                    break tri;
                }
                tries += 1;
                if tries >= MAX_RETRIES {
                    return Err(Error::GeneratorExhausted(MAX_RETRIES));
                }
            };
            t.extend(tri);
        }
        t.truncate(seq_len);
        let pos = (1..seq_len - 1).filter(|&p| map.contains_key(&(t[p - 1], t[p]))).collect();
        out.tokens.push(t);
        out.score_positions.push(pos);
    }
    Ok(out)
}

fn fits(map: &BTreeMap<(usize, usize), usize>, t: &[usize], tri: &[usize; 3]) -> bool {
    let n = t.len();
    let ok = |a: usize, b: usize, c: usize| map.get(&(a, b)).is_none_or(|&v| v == c);
    match n {
        0 => true,
        1 => ok(t[0], tri[0], tri[1]),
        _ => ok(t[n - 2], t[n - 1], tri[0]) && ok(t[n - 1], tri[0], tri[1]),
    }
}

/// `x₁ … x_T` distinct, then `x_{T+1} = x_i` for an interior `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplifiedSample {
    pub tokens: Vec<usize>,
    /// Zero-based index of the repeated token (`1 ≤ repeat ≤ T − 2`).
    pub repeat: usize,
}

impl SimplifiedSample {
    /// The induction answer after the final token.
    pub fn target(&self) -> usize {
        self.tokens[self.repeat + 1]
    }
}

pub fn gen_simplified_sample(rng: &mut RngStream, t: usize, vocab: usize) -> Result<SimplifiedSample> {
    if t < 3 {
        return Err(Error::config("simplified samples need T >= 3"));
    }
    if t > vocab {
        return Err(Error::config(format!("T = {t} exceeds vocab {vocab}")));
    }
    let mut tokens = rng.sample_distinct(vocab, t);
    let repeat = 1 + rng.below(t as u64 - 2) as usize;
    tokens.push(tokens[repeat]);
    Ok(SimplifiedSample { tokens, repeat })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predict positions whose argmax is the induction target.
/// `logits[k]` holds sample `k`'s `[len × vocab]` logits.
pub fn induction_accuracy<F: Real>(logits: &[Vec<F>], samples: &[InductionSample], vocab: usize) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (l, s) in logits.iter().zip(samples) {
        for (p, target) in s.targets() {
            total += 1;
            hit += usize::from(argmax(&l[p * vocab..(p + 1) * vocab]) == target);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
