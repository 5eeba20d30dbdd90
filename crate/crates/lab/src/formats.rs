//! Metrics JSONL and the CSV result files.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kvshift_core::theory::LandscapePoint;
use kvshift_core::train::MetricRecord;

use crate::error::{LabError, Result};

pub const LANDSCAPE_HEADER: &str = "alpha1,beta1,ot,variant,loss,dloss_dalpha1,dloss_dbeta1";
pub const ERROR_CURVE_HEADER: &str = "p1,sup_error,n_probes,max_len";

/// Appends one record per line, flushed immediately.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(LabError::io(path))?;
        Ok(Self {
            path: path.into(),
            file,
            last_step: None,
        })
    }

    /// Reopens for appending after keeping only records up to `step`.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<MetricRecord> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step <= s) {
            return Err(LabError::Usage(format!("metrics step {} is not after {}", r.step, self.last_step.unwrap())));
        }
        let line = serde_json::to_string(r)?;
        writeln!(self.file, "{line}").map_err(LabError::io(&self.path))?;
        self.file.flush().map_err(LabError::io(&self.path))?;
        self.last_step = Some(r.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(LabError::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(LabError::io(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(LabError::io(path))?;
    Ok(BufWriter::new(f))
}

pub fn write_landscape_csv(path: &Path, points: &[LandscapePoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = LabError::io(path);
    let r: std::io::Result<()> = (|| {
        writeln!(w, "{LANDSCAPE_HEADER}")?;
        for p in points {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.alpha1,
                p.beta1,
                p.ot,
                p.variant.name(),
                p.loss,
                p.dloss_dalpha1,
                p.dloss_dbeta1
            )?;
        }
        w.flush()
    })();
    r.map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorCurveRow {
    pub p1: f64,
    pub sup_error: f64,
    pub n_probes: usize,
    pub max_len: usize,
}

pub fn write_error_curve_csv(path: &Path, rows: &[ErrorCurveRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = LabError::io(path);
    let r: std::io::Result<()> = (|| {
        writeln!(w, "{ERROR_CURVE_HEADER}")?;
        for r in rows {
            writeln!(w, "{},{:e},{},{}", r.p1, r.sup_error, r.n_probes, r.max_len)?;
        }
        w.flush()
    })();
    r.map_err(io)
}

/// Writes pretty JSON followed by a newline.
pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(LabError::io(path))
}
