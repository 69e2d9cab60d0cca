//! Output directories and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::Invocation;
use crate::error::{usage, CliResult};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub invocation: Invocation,
    pub seeds: BTreeMap<String, u64>,
    /// Files reproduced exactly by a replay, relative to the run directory.
    pub artifacts: Vec<String>,
    /// Files whose content varies between runs (timings).
    pub volatile: Vec<String>,
    pub started_at: String,
    pub duration_seconds: f64,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

/// Collects the files a command writes.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub artifacts: Vec<String>,
    pub volatile: Vec<String>,
}

impl RunDir {
    /// `out` when given, otherwise a fresh `run/<timestamp>-<command>`.
    pub fn create(out: Option<&Path>, command: &str) -> CliResult<Self> {
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = PathBuf::from("run").join(format!("{stamp}-{command}"));
                let mut candidate = base.clone();
                let mut i = 2;
                while candidate.exists() {
                    candidate = PathBuf::from(format!("{}-{i}", base.display()));
                    i += 1;
                }
                candidate
            }
        };
        fs::create_dir_all(&root).map_err(|e| usage(format!("cannot create {}: {e}", root.display())))?;
        Ok(RunDir { root, artifacts: Vec::new(), volatile: Vec::new() })
    }

    /// Absolute-or-relative path of `rel`, registered as a reproducible artifact.
    pub fn artifact(&mut self, rel: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
        self.root.join(rel)
    }

    pub fn volatile(&mut self, rel: &str) -> PathBuf {
        if !self.volatile.iter().any(|a| a == rel) {
            self.volatile.push(rel.to_string());
        }
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> CliResult<()> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).map_err(|e| usage(format!("cannot create {}: {e}", p.display())))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| usage(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

/// Absolute form of an input path, so manifests replay from any directory.
pub fn absolute(path: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}
