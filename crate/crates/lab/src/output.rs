//! Output locations, run manifests and the one-run-per-directory lock.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Overrides the default output root (`runs`).
pub const OUT_ROOT_ENV: &str = "KVSHIFT_OUT_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".kvshift.lock";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// The parsed command, replayable with `kvshift rerun`.
    pub command: serde_json::Value,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub started_ms: u64,
    pub finished_ms: u64,
}

impl RunManifest {
    pub fn start(subcommand: &str, command: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.into(),
            command,
            config: serde_json::Value::Null,
            seed: None,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_ms: now_ms(),
            finished_ms: 0,
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_ms = now_ms();
        crate::formats::write_json(path, &self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(LabError::io(path))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Held while a run writes into a directory; removed on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(LabError::io(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                let _ = fs::write(&path, std::process::id().to_string());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LabError::Locked(dir.into())),
            Err(e) => Err(LabError::io(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
