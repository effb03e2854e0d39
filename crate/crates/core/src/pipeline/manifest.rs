use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};

/// `git describe`-style build version, falling back to the crate version.
pub fn version() -> &'static str {
    option_env!("UNGER_GIT_DESCRIBE").unwrap_or(env!("CARGO_PKG_VERSION"))
}

/// Record written next to the outputs of every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join("manifests").join(format!("{command}.json"))
}

/// Files and directories created by one stage. Unless
/// [`OutputGuard::commit`] is called they are removed on drop, so a failed
/// stage leaves nothing half-written behind.
#[derive(Debug)]
pub struct OutputGuard {
    out: PathBuf,
    created_out: bool,
    paths: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
    start: Instant,
}

impl OutputGuard {
    pub fn new(out: &Path) -> Result<Self> {
        let created_out = !out.exists();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            created_out,
            paths: Vec::new(),
            dirs: Vec::new(),
            committed: false,
            start: Instant::now(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Registers `name` (relative to the output directory) and returns its
    /// full path. Anything already there is removed first.
    pub fn track(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        remove(&path)?;
        if let Some(parent) = path.parent() {
            let mut missing: Vec<PathBuf> = parent
                .ancestors()
                .take_while(|a| !a.exists())
                .map(Path::to_path_buf)
                .collect();
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            missing.reverse();
            self.dirs.extend(missing);
        }
        self.paths.push(path.clone());
        Ok(path)
    }

    /// Writes the manifest and keeps every tracked output.
    pub fn commit(mut self, command: &str, config: &RunConfig) -> Result<RunManifest> {
        let path = self.track(&format!("manifests/{command}.json"))?;
        let manifest = RunManifest {
            command: command.to_string(),
            version: version().to_string(),
            config_sha256: config.sha256(),
            seed: config.seed,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            outputs: self
                .paths
                .iter()
                .map(|p| p.strip_prefix(&self.out).unwrap_or(p).display().to_string())
                .collect(),
            config: config.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.committed = true;
        Ok(manifest)
    }
}

fn remove(path: &Path) -> Result<()> {
    let result = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        return Ok(());
    };
    result.map_err(|e| Error::io(path, e))
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.paths.iter().rev() {
            if let Err(e) = remove(p) {
                log::warn!("could not remove partial output: {e}");
            }
        }
        // created parents go deepest first; non-empty ones stay
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
        if self.created_out {
            let _ = fs::remove_dir(&self.out);
        }
    }
}
