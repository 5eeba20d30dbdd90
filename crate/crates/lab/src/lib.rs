//! Files, presets and the command-line driver around `kvshift-core`.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod output;
pub mod presets;
pub mod runner;

pub use error::{LabError, Result};
