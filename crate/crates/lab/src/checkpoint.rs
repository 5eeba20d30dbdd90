//! Binary checkpoints.
//!
//! ```text
//! "KVSL" | u32 version | u32 n, config JSON (n bytes) | u64 config hash
//! u32 param count, then per parameter:
//!     u16 n, name | u8 rank, u32 dims… | u64 numel | f32 data…
//! u8 has_optimizer [u64 t, then m and v of every parameter as f32]
//! u64 rng seed | u64 rng counter | u64 step
//! ```
//!
//! All integers and floats are little-endian. The hash is the first eight
//! bytes of SHA-256 over the config JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use kvshift_core::model::{Model, ModelConfig};
use kvshift_core::train::AdamState;
use kvshift_core::{RngStream, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"KVSL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub rng: RngStream,
    pub step: u64,
}

pub fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("model config serializes")
}

pub fn config_hash(json: &str) -> u64 {
    let d = Sha256::digest(json.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let json = config_json(&ck.model.cfg);
    b.extend_from_slice(&(json.len() as u32).to_le_bytes());
    b.extend_from_slice(json.as_bytes());
    b.extend_from_slice(&config_hash(&json).to_le_bytes());
    let params = ck.model.params();
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, _, t) in &params {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(t.shape().len() as u8);
        for &d in t.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        put_f32s(&mut b, t.data());
    }
    match &ck.adam {
        Some(a) => {
            b.push(1);
            b.extend_from_slice(&a.t.to_le_bytes());
            for t in a.m.iter().chain(&a.v) {
                put_f32s(&mut b, t.data());
            }
        }
        None => b.push(0),
    }
    b.extend_from_slice(&ck.rng.seed.to_le_bytes());
    b.extend_from_slice(&ck.rng.counter.to_le_bytes());
    b.extend_from_slice(&ck.step.to_le_bytes());
    b
}

fn put_f32s(b: &mut Vec<u8>, xs: &[f32]) {
    b.reserve(xs.len() * 4);
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LabError::ckpt(field, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, f: &str) -> Result<u8> {
        Ok(self.take(1, f)?[0])
    }

    fn u16(&mut self, f: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, f)?.try_into().unwrap()))
    }

    fn u32(&mut self, f: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, f)?.try_into().unwrap()))
    }

    fn u64(&mut self, f: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, f)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, f: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| LabError::ckpt(f, "size overflow"))?, f)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Decodes a checkpoint. With `expected`, the stored model config must match
/// it exactly.
pub fn decode(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(LabError::ckpt("magic", "not a KVSL checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabError::ckpt("version", format!("unsupported version {version} (expected {VERSION})")));
    }
    let n = r.u32("config")? as usize;
    let json = std::str::from_utf8(r.take(n, "config")?).map_err(|_| LabError::ckpt("config", "not UTF-8"))?;
    let hash = r.u64("config_hash")?;
    if hash != config_hash(json) {
        return Err(LabError::ckpt("config_hash", "does not match the stored config"));
    }
    let cfg: ModelConfig =
        serde_json::from_str(json).map_err(|e| LabError::ckpt("config", e.to_string()))?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(LabError::ckpt(
                "config",
                format!("checkpoint config does not match the requested one\n  stored:    {json}\n  requested: {}", config_json(want)),
            ));
        }
    }
    // Build with zero init to get the declared parameter list and shapes.
    let mut shape_cfg = cfg.clone();
    shape_cfg.init_std = 0.0;
    let mut model = Model::<f32>::build(&shape_cfg, &mut RngStream::new(0))?;
    model.cfg = cfg;
    let declared: Vec<(String, Vec<usize>)> =
        model.params().into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect();
    let count = r.u32("param_count")? as usize;
    if count != declared.len() {
        return Err(LabError::ckpt("param_count", format!("{count} stored, {} declared", declared.len())));
    }
    let mut data = Vec::with_capacity(count);
    for (want_name, want_shape) in &declared {
        let len = r.u16("param_name")? as usize;
        let name = String::from_utf8_lossy(r.take(len, "param_name")?).into_owned();
        if &name != want_name {
            return Err(LabError::ckpt("param_name", format!("found `{name}`, expected `{want_name}`")));
        }
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        if &shape != want_shape {
            return Err(LabError::ckpt(&name, format!("shape {shape:?}, expected {want_shape:?}")));
        }
        let numel = r.u64(&name)? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(LabError::ckpt(&name, "element count does not match the shape"));
        }
        data.push(r.f32s(numel, &name)?);
    }
    for (t, d) in model.params_mut().into_iter().zip(data) {
        t.data_mut().copy_from_slice(&d);
    }
    let adam = match r.u8("has_optimizer")? {
        0 => None,
        1 => {
            let t = r.u64("adam_t")?;
            let shapes: Vec<Vec<usize>> = declared.iter().map(|d| d.1.clone()).collect();
            let mut read = |field: &str| -> Result<Vec<Tensor<f32>>> {
                shapes
                    .iter()
                    .map(|s| {
                        let v = r.f32s(s.iter().product(), field)?;
                        Ok(Tensor::new(s, v)?)
                    })
                    .collect()
            };
            let m = read("adam_m")?;
            let v = read("adam_v")?;
            Some(AdamState { m, v, t })
        }
        x => return Err(LabError::ckpt("has_optimizer", format!("invalid flag {x}"))),
    };
    let rng = RngStream::at(r.u64("rng_seed")?, r.u64("rng_counter")?);
    let step = r.u64("step")?;
    if r.pos != buf.len() {
        return Err(LabError::ckpt("trailer", "unexpected bytes after the step counter"));
    }
    Ok(Checkpoint { model, adam, rng, step })
}

/// Writes via a temporary file and rename, so a crash never leaves a
/// partial checkpoint under `path`.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("kvsl.tmp");
    let mut f = fs::File::create(&tmp).map_err(LabError::io(&tmp))?;
    f.write_all(&encode(ck)).map_err(LabError::io(&tmp))?;
    f.sync_all().map_err(LabError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(LabError::io(path))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(LabError::io(path))?;
    decode(&buf, expected)
}
