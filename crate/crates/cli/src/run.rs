//! Output directory bookkeeping: tracked files, manifest and error record.

use std::fs;
use std::path::{Path, PathBuf};

use phn_core::checkpoint::hex_digest;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorRecord, Result};

pub const MANIFEST: &str = "manifest.json";
pub const ERROR_RECORD: &str = "error.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub exit_code: i32,
    pub inputs: Vec<String>,
    /// Files written by the command, relative to the run directory, sorted.
    pub files: Vec<FileEntry>,
}

/// A run directory. Every write goes through it so the manifest is complete
/// and no input file is overwritten.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    command: String,
    inputs: Vec<PathBuf>,
    files: Vec<FileEntry>,
    persist: bool,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            files: Vec::new(),
            persist: true,
        })
    }

    /// A run that records what it would write but never touches the disk.
    pub fn in_memory(command: &str) -> Self {
        Self {
            root: PathBuf::new(),
            command: command.to_string(),
            inputs: Vec::new(),
            files: Vec::new(),
            persist: false,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Registers a file the command reads; writing to it later is refused.
    pub fn add_input(&mut self, path: &Path) {
        let abs = absolute(path);
        if !self.inputs.contains(&abs) {
            self.inputs.push(abs);
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let abs = absolute(&path);
        if self.inputs.contains(&abs) {
            return Err(CliError::Usage(format!(
                "refusing to overwrite input file {}",
                path.display()
            )));
        }
        if !self.persist {
            self.track(rel, bytes);
            return Ok(path);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        self.track(rel, bytes);
        Ok(path)
    }

    pub fn write_json<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<PathBuf> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(format!("cannot serialize {rel}: {e}")))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes through a closure that renders into memory first.
    pub fn write_with(
        &mut self,
        rel: &str,
        render: impl FnOnce(&mut Vec<u8>) -> phn_core::Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write(rel, &buf)
    }

    fn track(&mut self, rel: &str, bytes: &[u8]) {
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex_digest(bytes),
        });
    }

    fn manifest(&self, exit_code: i32) -> Manifest {
        let mut files = self.files.clone();
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Manifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: if exit_code == 0 { "ok" } else { "failed" }.to_string(),
            exit_code,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            files,
        }
    }

    pub fn finish(mut self) -> Result<Manifest> {
        let m = self.manifest(0);
        if !self.persist {
            return Ok(m);
        }
        self.write_json(MANIFEST, &m)?;
        Ok(m)
    }

    /// Best-effort failure record; errors while writing it are ignored.
    pub fn fail(mut self, error: &CliError) {
        if !self.persist {
            return;
        }
        let record = error.record();
        let _ = self.write_json(ERROR_RECORD, &record);
        let m = self.manifest(record.exit_code);
        let _ = self.write_json(MANIFEST, &m);
    }
}

pub fn absolute(path: &Path) -> PathBuf {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|d| d.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed manifest: {e}")))
}

pub fn read_error(dir: &Path) -> Result<ErrorRecord> {
    let p = dir.join(ERROR_RECORD);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed error record: {e}")))
}
