//! Run manifest written before any long-running work: enough to
//! reproduce the run from the manifest plus the input files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct ModelFileInfo {
    pub path: PathBuf,
    /// Format version embedded in the model file, if readable.
    pub version: Option<i64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_at: String,
    pub config_paths: Vec<PathBuf>,
    pub model_files: Vec<ModelFileInfo>,
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            out_dir: out_dir.to_path_buf(),
            seed,
            started_at: chrono::Utc::now().to_rfc3339(),
            config_paths: Vec::new(),
            model_files: Vec::new(),
        }
    }

    pub fn with_config(mut self, path: &Path) -> Self {
        self.config_paths.push(path.to_path_buf());
        self
    }

    pub fn with_model_file(mut self, path: &Path) -> Self {
        let version = fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str::<Value>(&text).ok())
            .and_then(|v| v.get("version").and_then(Value::as_i64));
        self.model_files.push(ModelFileInfo { path: path.to_path_buf(), version });
        self
    }

    /// Writes `<command>-manifest.json` under the output dir and
    /// returns its path.
    pub fn write(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create {}", self.out_dir.display()))?;
        let path = self.out_dir.join(format!("{}-manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).context("manifest serialization")?;
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
