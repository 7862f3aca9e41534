//! Run manifests: everything needed to repeat a command and check that it
//! reproduces its outputs byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A config file as it was when the command ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub path: String,
    pub sha256: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    pub configs: Vec<ConfigRecord>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileRecord>,
    /// Paths relative to `output_dir`.
    pub outputs: Vec<FileRecord>,
    pub output_dir: String,
    pub started_unix_ms: u128,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::files::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
