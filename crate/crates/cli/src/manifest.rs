use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use coreloss::model::ModelConfig;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub config: Option<ModelConfig>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed: None,
            outputs: Vec::new(),
            inputs: BTreeMap::new(),
            config: None,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        let shown = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        self.inputs.insert(name.into(), shown.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).context("serializing run manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
