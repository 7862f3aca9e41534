//! Input discovery, hashing and atomic output.

use std::io::Write;
use std::path::{Path, PathBuf};

use dsakv::{read_trace, Trace, TraceFormat};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| CliError::format(path, e))
}

/// Expands each pattern (a path or a glob) into a sorted, de-duplicated list.
/// A pattern that matches nothing is an error.
pub fn expand_inputs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let matches: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| CliError::Usage(format!("bad pattern '{p}': {e}")))?
            .filter_map(|r| r.ok())
            .filter(|p| p.is_file())
            .collect();
        if matches.is_empty() {
            return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
        out.extend(matches);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// A trace read from disk together with the hash of its bytes.
pub struct LoadedTrace {
    pub path: PathBuf,
    pub sha256: String,
    pub trace: Trace,
}

pub fn load_trace(path: &Path) -> Result<LoadedTrace> {
    let bytes = read_bytes(path)?;
    let trace = read_trace(bytes.as_slice(), TraceFormat::from_path(path)).map_err(|e| CliError::format(path, e))?;
    Ok(LoadedTrace { path: path.to_owned(), sha256: sha256_hex(&bytes), trace })
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Collects the files a command produces, recording their hashes.
#[derive(Debug)]
pub struct OutputSet {
    pub dir: PathBuf,
    pub files: Vec<crate::manifest::FileRecord>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_owned(), files: Vec::new() })
    }

    /// `name` is relative to the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        log::info!("wrote {}", self.dir.join(name).display());
        self.files.push(crate::manifest::FileRecord { path: name.to_owned(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }
}
