//! Experiment presets shipped with the tool, one pinned JSON file each.

use std::path::Path;

use kvshift_core::train::TrainConfig;

use crate::error::{LabError, Result};
use crate::runner::{Arm, Experiment};

pub const PRESETS: [(&str, &str); 5] = [
    ("fig1-depth", include_str!("../presets/fig1-depth.json")),
    ("fig2-width", include_str!("../presets/fig2-width.json")),
    ("fig4-ngram", include_str!("../presets/fig4-ngram.json")),
    ("fig7-variants", include_str!("../presets/fig7-variants.json")),
    ("fig7-ablations", include_str!("../presets/fig7-ablations.json")),
];

pub fn preset(name: &str) -> Result<Experiment> {
    let (_, text) = PRESETS.iter().find(|p| p.0 == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        LabError::Usage(format!("unknown preset `{name}` (have {})", names.join(", ")))
    })?;
    Ok(serde_json::from_str(text)?)
}

/// A preset name, or a file holding an experiment or a single train config
/// (run as one arm named after the file).
pub fn load_experiment(arg: &str) -> Result<Experiment> {
    if PRESETS.iter().any(|p| p.0 == arg) {
        return preset(arg);
    }
    let path = Path::new(arg);
    if !path.exists() {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        return Err(LabError::Usage(format!(
            "`{arg}` is neither a preset ({}) nor a file",
            names.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("arms").is_some() {
        return Ok(serde_json::from_value(value)?);
    }
    let config: TrainConfig = serde_json::from_value(value)?;
    let name = path
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    Ok(Experiment {
        name: name.clone(),
        description: String::new(),
        checkpoint_every: config.steps.max(1),
        arms: vec![Arm { name, config }],
    })
}
