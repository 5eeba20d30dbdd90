//! Dataset dumps: a header line `{generator, params, seed, count}` and one
//! `{tokens, predict_positions}` line per sample. In every record the token
//! after each predict position is the expected answer.

use std::io::{BufRead, Write};

use kvshift_core::tasks::{gen_induction_sequence, gen_ngram_batch, gen_simplified_sample, InductionParams, NgramTable};
use kvshift_core::RngStream;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Induction,
    Ngram,
    Simplified,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Induction => "induction",
            Generator::Ngram => "ngram",
            Generator::Simplified => "simplified",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "induction" => Ok(Generator::Induction),
            "ngram" => Ok(Generator::Ngram),
            "simplified" => Ok(Generator::Simplified),
            _ => Err(LabError::Usage(format!("unknown generator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramParams {
    pub vocab: usize,
    pub table_size: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplifiedParams {
    pub t: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GenParams {
    Induction(InductionParams),
    Ngram(NgramParams),
    Simplified(SimplifiedParams),
}

pub const NGRAM_DESK: NgramParams = NgramParams {
    vocab: 512,
    table_size: NgramTable::DEFAULT_SIZE,
    seq_len: 64,
};

pub const SIMPLIFIED_DESK: SimplifiedParams = SimplifiedParams { t: 16, vocab: 16 };

/// Named generator settings: `desk` for every generator, `paper` for
/// induction.
pub fn gen_preset(g: Generator, preset: &str) -> Result<GenParams> {
    match (g, preset) {
        (Generator::Induction, "desk") => Ok(GenParams::Induction(InductionParams::DESK)),
        (Generator::Induction, "paper") => Ok(GenParams::Induction(InductionParams::PAPER)),
        (Generator::Ngram, "desk") => Ok(GenParams::Ngram(NGRAM_DESK)),
        (Generator::Simplified, "desk") => Ok(GenParams::Simplified(SIMPLIFIED_DESK)),
        _ => Err(LabError::Usage(format!("no `{preset}` preset for the {} generator", g.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpSample {
    pub tokens: Vec<usize>,
    pub predict_positions: Vec<usize>,
}

pub fn generate(g: Generator, params: &GenParams, count: usize, seed: u64) -> Result<Vec<DumpSample>> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::with_capacity(count);
    match (g, params) {
        (Generator::Induction, GenParams::Induction(p)) => {
            for _ in 0..count {
                let s = gen_induction_sequence(&mut rng, p)?;
                out.push(DumpSample {
                    tokens: s.tokens,
                    predict_positions: s.predict_positions,
                });
            }
        }
        (Generator::Ngram, GenParams::Ngram(p)) => {
            let table = NgramTable::generate(&mut rng.derive(0), p.table_size, p.vocab)?;
            let b = gen_ngram_batch(&table, &mut rng.derive(1), count, p.seq_len)?;
            for (tokens, predict_positions) in b.tokens.into_iter().zip(b.score_positions) {
                out.push(DumpSample { tokens, predict_positions });
            }
        }
        (Generator::Simplified, GenParams::Simplified(p)) => {
            for _ in 0..count {
                let s = gen_simplified_sample(&mut rng, p.t, p.vocab)?;
                let mut tokens = s.tokens.clone();
                tokens.push(s.target());
                out.push(DumpSample {
                    tokens,
                    predict_positions: vec![p.t],
                });
            }
        }
        _ => return Err(LabError::Usage(format!("parameters do not belong to the {} generator", g.name()))),
    }
    Ok(out)
}

pub fn write_dataset(g: Generator, params: &GenParams, count: usize, seed: u64, w: &mut impl Write) -> Result<()> {
    let samples = generate(g, params, count, seed)?;
    let header = DumpHeader {
        generator: g.name().into(),
        params: serde_json::to_value(params)?,
        seed,
        count,
    };
    let io = |e| LabError::Io {
        path: "<dataset>".into(),
        source: e,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for s in &samples {
        writeln!(w, "{}", serde_json::to_string(s)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_dataset(r: impl BufRead) -> Result<(DumpHeader, Vec<DumpSample>)> {
    let mut lines = r.lines();
    let io = |e| LabError::Io {
        path: "<dataset>".into(),
        source: e,
    };
    let first = lines
        .next()
        .ok_or_else(|| LabError::Usage("dataset file is empty".into()))?
        .map_err(io)?;
    let header: DumpHeader = serde_json::from_str(&first)?;
    let mut samples = Vec::with_capacity(header.count);
    for line in lines {
        samples.push(serde_json::from_str(&line.map_err(io)?)?);
    }
    if samples.len() != header.count {
        return Err(LabError::Usage(format!(
            "dataset header announces {} samples, found {}",
            header.count,
            samples.len()
        )));
    }
    Ok((header, samples))
}
