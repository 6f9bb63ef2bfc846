//! Run manifests: a JSON record of how an output was produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GeatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Arguments after the program name; `geat replay` re-runs exactly these.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Fully resolved options, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| GeatError::Data(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| GeatError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GeatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GeatError::format(path, e.to_string()))
    }
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
