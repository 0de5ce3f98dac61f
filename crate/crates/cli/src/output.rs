//! All-or-nothing output: files are staged in memory, written to temporaries
//! next to their targets and renamed only once everything is ready.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;
use uatriage::{Error, Result};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "uatriage";

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((path.into(), bytes));
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn commit(self) -> Result<()> {
        let mut ready = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            let mut tmp = NamedTempFile::new_in(parent_dir(&path))?;
            tmp.write_all(&bytes)?;
            tmp.as_file().sync_all()?;
            ready.push((tmp, path));
        }
        for (tmp, path) in ready {
            tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        }
        Ok(())
    }
}

/// Builds a directory in a sibling temporary and swaps it into place.
/// An existing target is replaced only if it is empty or holds a manifest
/// from an earlier run.
pub fn commit_dir(target: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if target.exists() {
        let replaceable = target.is_dir()
            && (target.join(MANIFEST_FILE).is_file() || fs::read_dir(target)?.next().is_none());
        if !replaceable {
            return Err(Error::InvalidArgument(format!(
                "refusing to overwrite {}: not an empty directory or an earlier output",
                target.display()
            )));
        }
    }
    let parent = parent_dir(target);
    fs::create_dir_all(parent)?;
    let tmp = tempfile::Builder::new().prefix(".uatriage-").tempdir_in(parent)?;
    build(tmp.path())?;
    if target.exists() {
        fs::remove_dir_all(target)?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, target)?;
    Ok(())
}

/// Everything needed to repeat a run. Contains no timestamps or host data,
/// so identical runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub params: Command,
}

impl Manifest {
    pub fn new(command: &Command, seed: Option<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        Manifest {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.name().to_string(),
            seed,
            inputs,
            outputs,
            params: command.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
        if m.tool != TOOL {
            return Err(Error::Parse(format!("manifest {} was not written by {TOOL}", path.display())));
        }
        Ok(m)
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
